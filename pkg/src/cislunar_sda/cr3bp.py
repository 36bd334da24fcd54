"""Earth-Moon circular restricted three-body dynamics and propagation.

States are plain ``numpy`` arrays of shape ``(6,)`` holding nondimensional
synodic-frame position and velocity ``[x, y, z, vx, vy, vz]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as _k
from .errors import IntegrationError, NoCrossingError, SingularStateError

__all__ = [
    "CanonicalConstants",
    "EARTH_MOON",
    "IntegratorConfig",
    "Trajectory",
    "as_state",
    "pseudo_potential",
    "eom",
    "eom_jacobian",
    "jacobi_constant",
    "propagate",
    "propagate_states",
    "propagate_to_plane_crossing",
]


@dataclass(frozen=True)
class CanonicalConstants:
    """Mass ratio and the distance/time units used for nondimensionalization."""

    mu: float = 0.0121506
    du_km: float = 389703.0
    tu_s: float = 382981.0

    def __post_init__(self):
        if not 0.0 < self.mu < 0.5:
            raise ValueError(f"mass ratio must lie in (0, 0.5), got {self.mu}")
        if self.du_km <= 0 or self.tu_s <= 0:
            raise ValueError("canonical units must be positive")

    @property
    def vu_kms(self) -> float:
        """Velocity unit in km/s."""
        return self.du_km / self.tu_s

    @property
    def earth_center(self) -> np.ndarray:
        return np.array([-self.mu, 0.0, 0.0])

    @property
    def moon_center(self) -> np.ndarray:
        return np.array([1.0 - self.mu, 0.0, 0.0])


EARTH_MOON = CanonicalConstants()


@dataclass(frozen=True)
class IntegratorConfig:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-12
    max_step: float = math.inf
    method: str = "DOPRI5"

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("integrator tolerances must be positive")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.method.upper() not in ("DOPRI5", "RK45", "DP45"):
            raise ValueError(f"unsupported integrator {self.method!r}")


DEFAULT_INTEGRATOR = IntegratorConfig()


def as_state(s) -> np.ndarray:
    arr = np.array(s, dtype=np.float64).reshape(-1)
    if arr.shape != (6,):
        raise ValueError(f"state must have 6 components, got shape {np.shape(s)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("state has non-finite components")
    return arr


def _check_primaries(s, c):
    r1, r2 = _k.primary_distances(s[0], s[1], s[2], c.mu)
    if r1 < _k.SINGULAR_RADIUS or r2 < _k.SINGULAR_RADIUS:
        raise SingularStateError(f"state within {_k.SINGULAR_RADIUS} DU of a primary (r1={r1:.3g}, r2={r2:.3g})")
    return r1, r2


def pseudo_potential(s, c: CanonicalConstants = EARTH_MOON) -> float:
    s = as_state(s)
    _check_primaries(s, c)
    return float(_k.pseudo_potential(s, c.mu))


def eom(s, c: CanonicalConstants = EARTH_MOON) -> np.ndarray:
    """Time derivative of ``s`` under the rotating-frame equations of motion."""
    s = as_state(s)
    _check_primaries(s, c)
    out = np.empty(6)
    _k.eom_into(s, c.mu, out)
    return out


def eom_jacobian(s, c: CanonicalConstants = EARTH_MOON) -> np.ndarray:
    """6x6 partial derivative of :func:`eom` with respect to the state."""
    s = as_state(s)
    _check_primaries(s, c)
    A = np.empty((6, 6))
    _k.jacobian_into(s, c.mu, A)
    return A


def jacobi_constant(s, c: CanonicalConstants = EARTH_MOON) -> float:
    s = as_state(s)
    return 2.0 * pseudo_potential(s, c) - float(s[3:] @ s[3:])


def _raise_status(status, where=""):
    if status == _k.OK:
        return
    if status == _k.SINGULAR:
        raise SingularStateError(f"trajectory reached a primary{where}")
    if status == _k.STEP_TOO_SMALL:
        raise IntegrationError(f"step size fell below the minimum{where}")
    raise IntegrationError(f"integrator exceeded the step budget{where}")


class Trajectory:
    """Accepted-step record of a propagation with dense output.

    Calling the object evaluates a cubic Hermite interpolant between accepted
    steps, which is cheap but only accurate to roughly the fourth power of
    the step size. :meth:`state_at` re-integrates from the nearest accepted
    step and is accurate to integrator tolerance.
    """

    def __init__(self, times, states, derivatives, cfg, constants):
        self.times = times
        self.states = states
        self.derivatives = derivatives
        self.cfg = cfg
        self.constants = constants
        self._forward = times[-1] >= times[0]

    @property
    def t_span(self):
        return float(self.times[0]), float(self.times[-1])

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1].copy()

    def __len__(self):
        return len(self.times)

    def _locate(self, t):
        lo, hi = min(self.t_span), max(self.t_span)
        if not lo - 1e-12 <= t <= hi + 1e-12:
            raise ValueError(f"query time {t} outside propagated span [{lo}, {hi}]")
        if self._forward:
            i = int(np.searchsorted(self.times, t, side="right")) - 1
        else:
            i = int(np.searchsorted(-self.times, -t, side="right")) - 1
        return min(max(i, 0), len(self.times) - 2)

    def __call__(self, t) -> np.ndarray:
        t = float(t)
        if len(self.times) == 1:
            return self.states[0].copy()
        i = self._locate(t)
        t0, t1 = self.times[i], self.times[i + 1]
        h = t1 - t0
        s = (t - t0) / h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.states[i] + h10 * h * self.derivatives[i]
                + h01 * self.states[i + 1] + h11 * h * self.derivatives[i + 1])

    def state_at(self, t) -> np.ndarray:
        t = float(t)
        if len(self.times) == 1:
            return self.states[0].copy()
        i = self._locate(t)
        return propagate_states(self.states[i], [self.times[i], t], self.cfg, self.constants)[-1]


def propagate(s0, t_span, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
              c: CanonicalConstants = EARTH_MOON) -> Trajectory:
    """Propagate ``s0`` over ``t_span = (t_start, t_end)``; backward spans allowed."""
    s0 = as_state(s0)
    t0, t1 = (float(v) for v in t_span)
    if not (math.isfinite(t0) and math.isfinite(t1)):
        raise ValueError("time span must be finite")
    _check_primaries(s0, c)
    status, ts, ys, fs = _k.integrate_record(s0, t0, t1, cfg.rel_tol, cfg.abs_tol, cfg.max_step, c.mu)
    _raise_status(status, f" while propagating over [{t0}, {t1}]")
    return Trajectory(ts.copy(), ys.copy(), fs.copy(), cfg, c)


def propagate_states(s0, times, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                     c: CanonicalConstants = EARTH_MOON) -> np.ndarray:
    """States at each of ``times``; ``times[0]`` is the epoch of ``s0``.

    The integrator lands exactly on every requested time, so the result is
    accurate to integrator tolerance rather than interpolation error.
    """
    s0 = as_state(s0)
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("times must be a non-empty 1-D sequence")
    _check_primaries(s0, c)
    out = np.empty((len(times), 6))
    status, k = _k.propagate_grid(s0, times, cfg.rel_tol, cfg.abs_tol, cfg.max_step, c.mu, out)
    _raise_status(status, f" near t={times[min(k, len(times) - 1)]}")
    return out


def propagate_to_plane_crossing(s0, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                                c: CanonicalConstants = EARTH_MOON, *, direction: int = -1,
                                max_horizon: float = 20.0, tol: float = 1e-10):
    """Propagate until the trajectory meets the ``x = 0`` plane.

    Returns ``(state, crossing_time)`` with ``crossing_time`` negative for
    backward propagation. The crossing is bracketed by a sign change of
    ``x`` between accepted steps, then refined by bisection on time.
    """
    s0 = as_state(s0)
    _check_primaries(s0, c)
    if abs(s0[0]) < tol:
        return s0, 0.0
    sgn = 1.0 if direction >= 0 else -1.0
    t_end = sgn * max_horizon
    Q = np.zeros((6, 6))
    y = s0.copy()
    t = 0.0
    h = 0.0
    nxt = np.empty(6)
    while (t_end - t) * sgn > 0.0:
        status, h, t_new = _k.accepted_step(y, t, t_end, h, cfg.rel_tol, cfg.abs_tol, cfg.max_step, c.mu, Q, nxt)
        _raise_status(status, " while searching for the x = 0 crossing")
        if nxt[0] == 0.0:
            return nxt.copy(), float(t_new)
        if np.sign(nxt[0]) != np.sign(y[0]):
            return _bisect_crossing(y, t, t_new, cfg, c, tol)
        y[:] = nxt
        t = t_new
    raise NoCrossingError(f"no x = 0 crossing within {max_horizon} TU")


def _bisect_crossing(y_a, t_a, t_b, cfg, c, tol):
    # the bracket start is always re-used as the integration origin so each
    # trial is a single short integration
    lo, hi = t_a, t_b
    x_lo = y_a[0]
    best = None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s_mid = propagate_states(y_a, [t_a, mid], cfg, c)[-1]
        best = (s_mid, mid)
        if abs(s_mid[0]) < tol or mid in (lo, hi):
            break
        if np.sign(s_mid[0]) == np.sign(x_lo):
            lo = mid
        else:
            hi = mid
    state, t = best
    return state, float(t)
