"""Extended Kalman filter tracking of a target with angles-only observers."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from .cr3bp import (DEFAULT_INTEGRATOR, EARTH_MOON, CanonicalConstants, IntegratorConfig,
                    as_state, propagate_states)
from .errors import InnovationSingularError, IntegrationError, SingularStateError
from .measurement import (EARTH_RADIUS_KM, MOON_RADIUS_KM, SensorSpec)
from .tasking import TaskingSchedule

P0_FLOOR = 1e-16
# keeps R positive definite when the angle noise is set to zero
SIGMA_FILTER_FLOOR = 1e-10


def build_snc_q(sigma_dyn: float, dt: float) -> np.ndarray:
    """State-noise-compensation process noise ``Gamma sigma^2 Gamma^T``.

    ``Gamma`` maps a constant unmodeled acceleration over ``dt`` into
    position (``dt^2/2``) and velocity (``dt``).
    """
    if sigma_dyn < 0:
        raise ValueError("sigma_dyn must be non-negative")
    if not dt > 0:
        raise ValueError("dt must be positive")
    I = np.eye(3)
    G = np.vstack([0.5 * dt * dt * I, dt * I])
    return sigma_dyn**2 * (G @ G.T)


@dataclass(frozen=True)
class NoiseModel:
    sigma_dyn: float = 1e-5
    dt: float = 0.02
    sigma_angle: float = SensorSpec().sigma_angle
    init_perturbation_scale: float = 1.0
    sigma_filter_floor: float = SIGMA_FILTER_FLOOR

    def __post_init__(self):
        if self.sigma_dyn < 0 or self.sigma_angle < 0 or self.init_perturbation_scale < 0:
            raise ValueError("noise parameters must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def Q(self) -> np.ndarray:
        return build_snc_q(self.sigma_dyn, self.dt)

    @property
    def sigma_filter(self) -> float:
        """Angle standard deviation the filter assumes (noise floored)."""
        return max(self.sigma_angle, self.sigma_filter_floor)

    @property
    def R_per_observer(self) -> np.ndarray:
        return self.sigma_filter**2 * np.eye(2)

    @classmethod
    def for_schedule(cls, schedule: TaskingSchedule, sensor: SensorSpec, **kw) -> "NoiseModel":
        return cls(dt=schedule.system_cadence, sigma_angle=sensor.sigma_angle, **kw)


@dataclass(frozen=True, eq=False)
class FilterState:
    x_hat: np.ndarray
    P: np.ndarray
    epoch: float = 0.0

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.shape != (6, 6):
            raise ValueError("covariance must be 6x6")
        object.__setattr__(self, "x_hat", as_state(self.x_hat))
        object.__setattr__(self, "P", P)


def init_estimate(truth_ic, noise: NoiseModel, seed) -> FilterState:
    """Perturb the truth by Gaussian draws with variance ``Q_ii`` (times the scale).

    The initial covariance is the diagonal of the squared perturbation,
    floored so that it stays positive definite.
    """
    truth_ic = as_state(truth_ic)
    rng = np.random.default_rng(seed)
    std = noise.init_perturbation_scale * np.sqrt(np.diag(noise.Q))
    x0 = truth_ic + std * rng.standard_normal(6)
    return FilterState(x0, np.diag(np.maximum((x0 - truth_ic) ** 2, P0_FLOOR)), 0.0)


def predict(fs: FilterState, dt: float, noise: NoiseModel | None = None,
            cfg: IntegratorConfig = DEFAULT_INTEGRATOR, c: CanonicalConstants = EARTH_MOON,
            Q: np.ndarray | None = None) -> FilterState:
    """Integrate the estimate and the Riccati equation ``P' = AP + PA^T + Q`` over ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if Q is None:
        Q = np.zeros((6, 6)) if noise is None else noise.Q
    x_out = np.empty(6)
    P_out = np.empty((6, 6))
    status, _ = _k.predict_core(fs.x_hat, np.ascontiguousarray(fs.P, dtype=float), fs.epoch, fs.epoch + dt,
                                0.0, np.asarray(Q, float), cfg.rel_tol, cfg.abs_tol, cfg.max_step,
                                c.mu, x_out, P_out)
    if status == _k.SINGULAR:
        raise SingularStateError("estimate reached a primary during prediction")
    if status != _k.OK:
        raise IntegrationError("prediction step failed")
    return FilterState(x_out, P_out, fs.epoch + dt)


def correct(fs: FilterState, tasked, noise: NoiseModel, c: CanonicalConstants = EARTH_MOON) -> FilterState:
    """Stacked correction from the tasked observers that produced a measurement.

    ``tasked`` is a sequence of ``(observer_state, measurement)`` pairs with
    ``measurement`` either an ``(alpha, epsilon)`` pair or ``None`` when the
    target was not visible. With no usable measurement the estimate is
    returned unchanged.
    """
    m = len(tasked)
    if m == 0:
        return fs
    obs = np.zeros((m, 3))
    meas = np.zeros((m, 2))
    use = np.zeros(m, dtype=bool)
    for i, (o, z) in enumerate(tasked):
        obs[i] = np.asarray(o, float)[:3]
        if z is not None:
            meas[i] = z
            use[i] = True
    x_out = np.empty(6)
    P_out = np.empty((6, 6))
    innov = np.empty((m, 2))
    status, _, cond = _k.correct_core(fs.x_hat, np.ascontiguousarray(fs.P, dtype=float), obs, meas, use,
                                      noise.sigma_filter, c.mu, x_out, P_out, innov)
    if status == _k.CORR_SKIPPED:
        return fs
    if status == _k.CORR_SINGULAR:
        raise InnovationSingularError("innovation covariance is numerically singular", cond)
    _k.clamp_psd(P_out)
    return FilterState(x_out, P_out, fs.epoch)


@dataclass(eq=False)
class TrackResult:
    """Per-epoch record of one track; row 0 is the initialization epoch."""

    target_id: str
    family: str
    times: np.ndarray
    truth: np.ndarray
    estimate: np.ndarray
    p_diag: np.ndarray
    tasked: np.ndarray
    visible: np.ndarray
    corrected: np.ndarray
    innovation_max: np.ndarray
    min_eigenvalue: np.ndarray
    period: float | None = None
    error_flag: bool = False
    error_message: str = ""
    constants: CanonicalConstants = field(default=EARTH_MOON)
    covariance: np.ndarray | None = None

    @property
    def n_epochs(self) -> int:
        """Measurement epochs actually completed (excludes initialization)."""
        return len(self.times) - 1

    @property
    def visible_count(self) -> np.ndarray:
        return self.visible.sum(axis=1)

    @property
    def rmse_pos(self) -> float:
        from .harness import rmse_position
        return rmse_position(self)

    @property
    def rmse_vec_pos(self) -> float:
        from .harness import rmse_vector
        return rmse_vector(self, "position")

    @property
    def rmse_vel(self) -> float:
        from .harness import rmse_vector
        return rmse_vector(self, "velocity")

    @property
    def visibility_fraction(self) -> float:
        if self.n_epochs < 1:
            return 0.0
        return float(np.mean(self.visible[1:].any(axis=1)))

    def to_csv(self, path):
        du, vu = self.constants.du_km, self.constants.vu_kms
        header = (["epoch_tu"] + [f"truth_{a}" for a in ("x", "y", "z", "vx", "vy", "vz")]
                  + [f"est_{a}" for a in ("x", "y", "z", "vx", "vy", "vz")]
                  + [f"p{i}{i}" for i in range(1, 7)] + ["visible_count", "corrected"])
        scale = np.array([du] * 3 + [vu] * 3)
        pscale = scale**2
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(len(self.times)):
                row = [fmt(self.times[k])]
                row += [fmt(v) for v in self.truth[k] * scale]
                row += [fmt(v) for v in self.estimate[k] * scale]
                row += [fmt(v) for v in self.p_diag[k] * pscale]
                row += [int(self.visible[k].sum()), int(bool(self.corrected[k]))]
                w.writerow(row)


def fmt(v) -> str:
    """Nine significant digits, the format for every numeric output."""
    return f"{float(v):.9g}"


def observer_states(constellation) -> np.ndarray:
    """Stack observer epoch states from slots, records or raw 6-vectors."""
    out = []
    for o in constellation:
        s = getattr(o, "epoch_state", None)
        if s is None:
            s = getattr(o, "ic", o)
        out.append(as_state(s))
    if not out:
        raise ValueError("constellation must contain at least one observer")
    return np.array(out)


def observer_ephemerides(constellation, times, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                         c: CanonicalConstants = EARTH_MOON) -> np.ndarray:
    """(n_obs, len(times), 6) observer states on the epoch grid."""
    states = observer_states(constellation)
    return np.array([propagate_states(s, times, cfg, c) for s in states])


def run_track(truth_ic, constellation, schedule: TaskingSchedule, noise: NoiseModel,
              horizon: float = 8.0, seed=0, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
              sensor: SensorSpec = SensorSpec(), c: CanonicalConstants = EARTH_MOON,
              target_id: str = "target", family: str = "", period: float | None = None,
              ephemerides: np.ndarray | None = None, truth_states: np.ndarray | None = None,
              init_error: bool = True, keep_covariance: bool = False) -> TrackResult:
    """Simulate one tracking run over the schedule's epoch grid.

    Truth and observers follow the unperturbed dynamics. At every epoch the
    estimate is predicted, tasked observers that can see the (true) target
    produce noisy angles, and the filter is corrected with whatever arrived.
    Numerical failures end the track early with ``error_flag`` set.
    ``ephemerides`` and ``truth_states`` may be supplied to reuse
    propagations across tracks.
    """
    n = schedule.n_epochs(horizon)
    if n < 1:
        raise ValueError("horizon shorter than one system cadence")
    times = np.arange(n + 1) * schedule.system_cadence
    truth_ic = as_state(truth_ic)
    if truth_states is None:
        truth_states = propagate_states(truth_ic, times, cfg, c)
    if ephemerides is None:
        ephemerides = observer_ephemerides(constellation, times, cfg, c)
    n_obs = ephemerides.shape[0]
    if n_obs != schedule.n_observers:
        raise ValueError(f"schedule expects {schedule.n_observers} observers, got {n_obs}")
    rng = np.random.default_rng(seed)
    if init_error:
        fs0 = init_estimate(truth_ic, noise, rng)
    else:
        fs0 = FilterState(truth_ic, P0_FLOOR * np.eye(6))
    unit_noise = rng.standard_normal((n + 1, n_obs, 2))
    tasked = schedule.mask(horizon)
    est = np.empty((n + 1, 6))
    pdiag = np.empty((n + 1, 6))
    visible = np.zeros((n + 1, n_obs), dtype=bool)
    corrected = np.zeros(n + 1, dtype=bool)
    innov_max = np.zeros(n + 1)
    min_eig = np.zeros(n + 1)
    pfull = np.zeros((n + 1 if keep_covariance else 0, 6, 6))
    status, last = _k.ekf_track(np.ascontiguousarray(truth_states), np.ascontiguousarray(ephemerides),
                                tasked, unit_noise, times, fs0.x_hat, fs0.P, noise.Q,
                                noise.sigma_angle, noise.sigma_filter, sensor.max_range,
                                EARTH_RADIUS_KM / c.du_km, MOON_RADIUS_KM / c.du_km, c.mu,
                                cfg.rel_tol, cfg.abs_tol, cfg.max_step,
                                est, pdiag, visible, corrected, innov_max, min_eig, pfull)
    msg = ""
    if status != _k.OK:
        msg = {_k.SINGULAR: "estimate reached a primary",
               _k.STEP_TOO_SMALL: "integrator step size underflow",
               _k.TOO_MANY_STEPS: "integrator step budget exceeded",
               _k.TRACK_INNOVATION_SINGULAR: "innovation covariance singular"}.get(status, f"status {status}")
        msg = f"track aborted after epoch {last}: {msg}"
    m = last + 1
    return TrackResult(target_id, family, times[:m], truth_states[:m], est[:m], pdiag[:m],
                       tasked[:m], visible[:m], corrected[:m], innov_max[:m], min_eig[:m],
                       period, status != _k.OK, msg, c, pfull[:m] if keep_covariance else None)


__all__ = ["NoiseModel", "FilterState", "TrackResult", "build_snc_q", "init_estimate", "predict",
           "correct", "run_track", "observer_ephemerides", "observer_states", "fmt", "P0_FLOOR",
           "SIGMA_FILTER_FLOOR"]
