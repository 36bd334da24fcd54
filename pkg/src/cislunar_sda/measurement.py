"""Angles-only measurements referenced to the Moon, and visibility constraints."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as _k
from .cr3bp import EARTH_MOON, CanonicalConstants
from .errors import DegenerateGeometryError, InsideBodyError

ARCSEC = math.pi / (180.0 * 3600.0)
EARTH_RADIUS_KM = 6378.1
MOON_RADIUS_KM = 1737.1

LOW_FIDELITY_ARCSEC = 192.0118
HIGH_FIDELITY_ARCSEC = 26.7518
FIDELITY_ARCSEC = {"low": LOW_FIDELITY_ARCSEC, "high": HIGH_FIDELITY_ARCSEC}


@dataclass(frozen=True)
class PrimaryBody:
    name: str
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("body radius must be positive")


def primary_bodies(c: CanonicalConstants = EARTH_MOON) -> tuple[PrimaryBody, PrimaryBody]:
    """Earth and Moon with radii in DU."""
    return (PrimaryBody("Earth", c.earth_center, EARTH_RADIUS_KM / c.du_km),
            PrimaryBody("Moon", c.moon_center, MOON_RADIUS_KM / c.du_km))


@dataclass(frozen=True)
class SensorSpec:
    sigma_angle: float = LOW_FIDELITY_ARCSEC * ARCSEC
    max_range: float = 500000.0 / EARTH_MOON.du_km
    individual_cadence: float = 0.02

    def __post_init__(self):
        if self.sigma_angle < 0:
            raise ValueError("sigma_angle must be non-negative")
        if not (self.max_range > 0 and self.individual_cadence > 0):
            raise ValueError("max_range and individual_cadence must be positive")

    @classmethod
    def fidelity(cls, level: str, **kw) -> "SensorSpec":
        try:
            arcsec = FIDELITY_ARCSEC[level.lower()]
        except KeyError:
            raise ValueError(f"fidelity must be 'low' or 'high', got {level!r}") from None
        return cls(sigma_angle=arcsec * ARCSEC, **kw)

    @property
    def R(self) -> np.ndarray:
        return self.sigma_angle**2 * np.eye(2)


@dataclass(frozen=True)
class RelativeGeometry:
    gamma: np.ndarray
    rho: np.ndarray


def relative_geometry(observer, target, mu: float = EARTH_MOON.mu) -> RelativeGeometry:
    """Observer-to-Moon vector ``gamma`` and observer-to-target vector ``rho``."""
    o = np.asarray(observer, dtype=float)[:3]
    t = np.asarray(target, dtype=float)[:3]
    return RelativeGeometry(np.array([1.0 - mu, 0.0, 0.0]) - o, t - o)


def measure(geom: RelativeGeometry) -> tuple[float, float]:
    """Azimuth and elevation in radians, both in ``[0, pi]``.

    Azimuth compares the xy-plane projections of ``gamma`` and ``rho``,
    elevation their xz-plane projections.
    """
    status, a, e = _k.angles(np.asarray(geom.gamma, float), np.asarray(geom.rho, float))
    if status != _k.GEOM_OK:
        raise DegenerateGeometryError("projection of gamma or rho is (near) zero")
    return a, e


def measurement_jacobian(geom: RelativeGeometry) -> np.ndarray:
    """2x6 partial of the angles with respect to the target state."""
    part = np.empty((2, 3))
    status = _k.angle_partials(np.asarray(geom.gamma, float), np.asarray(geom.rho, float), part)
    if status == _k.GEOM_DEGENERATE:
        raise DegenerateGeometryError("projection of gamma or rho is (near) zero")
    if status == _k.GEOM_SINGULAR_DERIV:
        raise DegenerateGeometryError("angle at 0 or pi; arccos derivative is singular")
    H = np.zeros((2, 6))
    H[:, :3] = part
    return H


def exclusion_angles(observer, target, body: PrimaryBody) -> tuple[float, float]:
    """Separation ``theta`` of target from body center and the body's apparent half-angle ``omega``."""
    o = np.asarray(observer, dtype=float)[:3]
    gamma_p = body.center - o
    rho = np.asarray(target, dtype=float)[:3] - o
    dist = float(np.linalg.norm(gamma_p))
    if dist <= body.radius:
        raise InsideBodyError(f"observer is inside the {body.name}")
    if np.linalg.norm(rho) == 0.0:
        raise DegenerateGeometryError("target coincides with observer")
    return _k.separation_angle(gamma_p, rho), _k.tangent_half_angle(body.radius, dist)


def visibility(observer, target, sensor: SensorSpec = SensorSpec(), bodies=None,
               mu: float = EARTH_MOON.mu) -> bool:
    """True when the target is within range and outside every body's exclusion cone."""
    if bodies is None:
        bodies = primary_bodies(CanonicalConstants(mu=mu))
    o = np.asarray(observer, dtype=float)[:3]
    t = np.asarray(target, dtype=float)[:3]
    rng = float(np.linalg.norm(t - o))
    if rng == 0.0 or rng > sensor.max_range:
        return False
    for body in bodies:
        try:
            theta, omega = exclusion_angles(o, t, body)
        except InsideBodyError:
            return False
        if theta < omega:
            return False
    return True


def synthesize_measurement(geom: RelativeGeometry, sensor: SensorSpec, seed) -> tuple[float, float]:
    """Noisy angles: truth plus Gaussian noise, clamped back into ``[0, pi]``."""
    a, e = measure(geom)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(2) * sensor.sigma_angle
    return (min(max(a + v[0], 0.0), math.pi), min(max(e + v[1], 0.0), math.pi))
