"""Scenario evaluation: RMSE loss, mean objective, validation statistics and outputs."""
from __future__ import annotations

import csv
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import TargetSet, dro_group, stable_seed
from .cr3bp import DEFAULT_INTEGRATOR, EARTH_MOON, CanonicalConstants, IntegratorConfig, propagate_states
from .ekf import NoiseModel, TrackResult, fmt, observer_states, run_track
from .errors import SDAError, TrackError
from .measurement import SensorSpec
from .tasking import TaskingSchedule

log = logging.getLogger(__name__)

FAILURE_PENALTY_KM = 1e4

# sibling families share a histogram
HISTOGRAM_GROUPS = {
    "L1NHO": "L1 halo", "L1SHO": "L1 halo",
    "L2NHO": "L2 halo", "L2SHO": "L2 halo",
    "BNO": "butterfly", "BSO": "butterfly",
    "LPEO": "low prograde", "LPWO": "low prograde",
    "R1:1O": "resonant", "R2:1O": "resonant", "R4:1O": "resonant",
    "DRO": "DRO", "L1TT": "L1 transfer", "NRHO": "L2 halo",
}
DEFAULT_POS_BINS = np.array([0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, np.inf])
DEFAULT_VEL_BINS = np.array([0, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, np.inf])


def default_threads() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _check(track):
    if len(track.times) < 2:
        raise TrackError(f"track {track.target_id!r} has no measurement epochs")


def rmse_position(track: TrackResult) -> float:
    """RMS over epochs 1..n of the difference of position norms, in km.

    Error orthogonal to the position vector does not change the norm, so
    this metric can be zero for an estimate that is far from the truth.
    """
    _check(track)
    d = np.linalg.norm(track.estimate[1:, :3], axis=1) - np.linalg.norm(track.truth[1:, :3], axis=1)
    return float(np.sqrt(np.mean(d * d)) * track.constants.du_km)


def rmse_vector(track: TrackResult, component: str = "position") -> float:
    """RMS of the error-vector norm; km for position, km/s for velocity."""
    _check(track)
    if component == "position":
        sl, scale = slice(0, 3), track.constants.du_km
    elif component == "velocity":
        sl, scale = slice(3, 6), track.constants.vu_kms
    else:
        raise ValueError("component must be 'position' or 'velocity'")
    e = track.estimate[1:, sl] - track.truth[1:, sl]
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))) * scale)


@dataclass(frozen=True)
class FamilyStats:
    family: str
    count: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    mean_visibility: float = float("nan")
    skipped: int = 0

    @classmethod
    def from_values(cls, family, values, visibility=None, skipped=0):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            nan = float("nan")
            return cls(family, 0, nan, nan, nan, nan, nan, nan, nan, skipped)
        q = np.percentile(v, [0, 25, 50, 75, 100])
        vis = float(np.mean(visibility)) if visibility is not None and len(visibility) else float("nan")
        return cls(family, int(v.size), *(float(x) for x in q), float(v.mean()), vis, skipped)


def three_sigma_series(track: TrackResult) -> dict:
    """Error components (estimate minus truth) and their 3-sigma envelopes, in km and km/s."""
    c = track.constants
    scale = np.array([c.du_km] * 3 + [c.vu_kms] * 3)
    return {
        "epoch_tu": track.times.copy(),
        "error": (track.estimate - track.truth) * scale,
        "sigma3": 3.0 * np.sqrt(np.maximum(track.p_diag, 0.0)) * scale,
        "no_visibility": ~track.corrected.astype(bool),
    }


# --------------------------------------------------------------------------
# scenario evaluation
# --------------------------------------------------------------------------

class Scenario:
    """Fixed targets, schedule and noise against which constellations are scored.

    Target truths are propagated once; observer ephemerides are cached per
    slot so that a genetic search re-propagates each slot only once. Every
    target's random stream depends only on ``(seed, target_id)``, so all
    constellations see the same initial errors and measurement noise.
    """

    def __init__(self, targets: TargetSet, schedule: TaskingSchedule, noise: NoiseModel,
                 sensor: SensorSpec = SensorSpec(), horizon: float = 8.0, seed: int = 0,
                 cfg: IntegratorConfig = DEFAULT_INTEGRATOR, c: CanonicalConstants = EARTH_MOON,
                 threads: int | None = None, penalty_km: float = FAILURE_PENALTY_KM):
        if len(targets) == 0:
            raise ValueError("target set is empty")
        self.targets = targets
        self.schedule = schedule
        self.noise = noise
        self.sensor = sensor
        self.horizon = horizon
        self.seed = int(seed)
        self.cfg = cfg
        self.c = c
        self.threads = threads or default_threads()
        self.penalty_km = penalty_km
        n = schedule.n_epochs(horizon)
        if n < 1:
            raise ValueError("horizon shorter than one system cadence")
        self.times = np.arange(n + 1) * schedule.system_cadence
        self._truth: dict[str, np.ndarray | None] = {}
        self._ephem: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def target_seed(self, target_id: str) -> int:
        return stable_seed(self.seed, "track", target_id)

    def _truth_states(self, target):
        with self._lock:
            if target.target_id in self._truth:
                return self._truth[target.target_id]
        try:
            states = propagate_states(target.state, self.times, self.cfg, self.c)
        except SDAError as exc:
            log.warning("target %s truth propagation failed: %s", target.target_id, exc)
            states = None
        with self._lock:
            self._truth[target.target_id] = states
        return states

    def _slot_key(self, obs, i):
        key = getattr(obs, "key", None)
        if key is None:
            key = "raw:" + ",".join(repr(float(v)) for v in observer_states([obs])[0])
        return key

    def ephemerides(self, constellation) -> np.ndarray:
        out = []
        for i, o in enumerate(constellation):
            key = self._slot_key(o, i)
            with self._lock:
                eph = self._ephem.get(key)
            if eph is None:
                eph = propagate_states(observer_states([o])[0], self.times, self.cfg, self.c)
                with self._lock:
                    self._ephem.setdefault(key, eph)
            out.append(eph)
        return np.array(out)

    def track(self, constellation, target, ephemerides=None) -> TrackResult:
        truth = self._truth_states(target)
        if ephemerides is None:
            ephemerides = self.ephemerides(constellation)
        if truth is None:
            return _failed_track(target, self.c, "truth propagation failed")
        try:
            return run_track(target.state, constellation, self.schedule, self.noise, self.horizon,
                             self.target_seed(target.target_id), self.cfg, self.sensor, self.c,
                             target.target_id, target.family, target.period,
                             ephemerides=ephemerides, truth_states=truth)
        except SDAError as exc:
            return _failed_track(target, self.c, str(exc))

    def tracks(self, constellation, targets=None) -> list[TrackResult]:
        targets = list(self.targets if targets is None else targets)
        eph = self.ephemerides(constellation)
        if self.threads <= 1 or len(targets) == 1:
            return [self.track(constellation, t, eph) for t in targets]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda t: self.track(constellation, t, eph), targets))

    def loss(self, track: TrackResult) -> float:
        if track.error_flag or track.n_epochs < 1:
            log.warning("target %s failed (%s); charging %.3g km", track.target_id,
                        track.error_message, self.penalty_km)
            return self.penalty_km
        return rmse_position(track)

    def objective(self, constellation) -> float:
        """Mean position-RMSE loss over the target set, in km."""
        return float(np.mean([self.loss(t) for t in self.tracks(constellation)]))


def _failed_track(target, c, message) -> TrackResult:
    z6 = np.zeros((0, 6))
    return TrackResult(target.target_id, target.family, np.zeros(0), z6, z6, z6,
                       np.zeros((0, 0), bool), np.zeros((0, 0), bool), np.zeros(0, bool),
                       np.zeros(0), np.zeros(0), target.period, True, message, c)


def objective(constellation, schedule: TaskingSchedule, opt_set: TargetSet, noise: NoiseModel,
              seed: int = 0, **kw) -> float:
    return Scenario(opt_set, schedule, noise, seed=seed, **kw).objective(constellation)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

@dataclass
class ValidationResult:
    tracks: list
    family_stats: dict
    histograms: dict
    skipped: int

    def stats_for(self, family) -> FamilyStats:
        return self.family_stats[family]


def family_key(track: TrackResult, dro_split: float | None) -> str:
    if dro_split is None or track.family != "DRO" or track.period is None:
        return track.family
    return dro_group_from_period(track.period, dro_split)


def dro_group_from_period(period, split):
    return "DRO-long" if period > split else "DRO-short"


def aggregate(tracks: Sequence[TrackResult], dro_split: float | None = 3.75,
              pos_bins=DEFAULT_POS_BINS, vel_bins=DEFAULT_VEL_BINS,
              groups: dict | None = None) -> ValidationResult:
    """Per-family box statistics, visibility and grouped histograms.

    Tracks that ended in error are left out and counted. With ``dro_split``
    the DRO family additionally gets ``DRO-short``/``DRO-long`` rows.
    """
    groups = HISTOGRAM_GROUPS if groups is None else groups
    ok = [t for t in tracks if not t.error_flag and t.n_epochs >= 1]
    bad = [t for t in tracks if t not in ok]
    fams: dict[str, list[TrackResult]] = {}
    for t in ok:
        fams.setdefault(t.family, []).append(t)
        if dro_split is not None and t.family == "DRO" and t.period is not None:
            fams.setdefault(dro_group_from_period(t.period, dro_split), []).append(t)
    for t in bad:
        fams.setdefault(t.family, [])
    stats = {}
    for fam, ts in fams.items():
        skipped = sum(1 for t in bad if t.family == fam)
        stats[fam] = FamilyStats.from_values(fam, [t.rmse_pos for t in ts],
                                             [t.visibility_fraction for t in ts], skipped)
    hist = {}
    for t in ok:
        g = groups.get(t.family, t.family)
        hist.setdefault(g, {"pos": [], "vel": []})
        hist[g]["pos"].append(t.rmse_pos)
        hist[g]["vel"].append(t.rmse_vel)
    histograms = {}
    for g, d in hist.items():
        histograms[g] = {"position": (np.asarray(pos_bins, float), np.histogram(d["pos"], bins=pos_bins)[0]),
                         "velocity": (np.asarray(vel_bins, float), np.histogram(d["vel"], bins=vel_bins)[0])}
    if bad:
        log.warning("%d track(s) failed and were left out of the statistics", len(bad))
    return ValidationResult(list(tracks), stats, histograms, len(bad))


def validate(constellation, schedule: TaskingSchedule, validation_set: TargetSet, noise: NoiseModel,
             seed: int = 0, dro_split: float | None = 3.75, pos_bins=DEFAULT_POS_BINS,
             vel_bins=DEFAULT_VEL_BINS, **kw) -> ValidationResult:
    sc = Scenario(validation_set, schedule, noise, seed=seed, **kw)
    return aggregate(sc.tracks(constellation), dro_split, pos_bins, vel_bins)


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------

PER_TARGET_COLUMNS = ("target_id", "family", "period_tu", "rmse_pos_km", "rmse_vec_pos_km",
                      "rmse_vel_kms", "visibility_fraction", "error")


def write_per_target(tracks, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_TARGET_COLUMNS)
        for t in tracks:
            if t.error_flag or t.n_epochs < 1:
                w.writerow([t.target_id, t.family, "" if t.period is None else fmt(t.period),
                            "", "", "", "", t.error_message or "error"])
                continue
            w.writerow([t.target_id, t.family, "" if t.period is None else fmt(t.period),
                        fmt(t.rmse_pos), fmt(t.rmse_vec_pos), fmt(t.rmse_vel),
                        fmt(t.visibility_fraction), ""])


def read_per_target(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def stats_from_rows(rows, dro_split: float | None = 3.75) -> dict:
    """Family statistics recomputed from ``per_target.csv`` rows."""
    fams: dict[str, list] = {}
    skipped: dict[str, int] = {}
    for r in rows:
        fam = r["family"]
        if r.get("error"):
            skipped[fam] = skipped.get(fam, 0) + 1
            fams.setdefault(fam, [])
            continue
        item = (float(r["rmse_pos_km"]), float(r["visibility_fraction"]))
        fams.setdefault(fam, []).append(item)
        if dro_split is not None and fam == "DRO" and r["period_tu"]:
            fams.setdefault(dro_group_from_period(float(r["period_tu"]), dro_split), []).append(item)
    return {f: FamilyStats.from_values(f, [v[0] for v in items], [v[1] for v in items],
                                       skipped.get(f, 0))
            for f, items in fams.items()}


def _json_number(v):
    return None if not np.isfinite(v) else float(fmt(v))


def write_family_stats(stats: dict, path):
    out = {}
    for fam in sorted(stats):
        d = asdict(stats[fam])
        out[fam] = {k: (_json_number(v) if isinstance(v, float) else v) for k, v in d.items()}
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def write_histograms(histograms: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "quantity", "bin_lo", "bin_hi", "count"])
        for g in sorted(histograms):
            for q in ("position", "velocity"):
                edges, counts = histograms[g][q]
                for i, n in enumerate(counts):
                    w.writerow([g, q, fmt(edges[i]), fmt(edges[i + 1]), int(n)])


def write_sigma_series(track: TrackResult, path):
    s = three_sigma_series(track)
    names = ("x", "y", "z", "vx", "vy", "vz")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch_tu"] + [f"err_{n}" for n in names] + [f"sigma3_{n}" for n in names]
                   + ["no_visibility"])
        for k in range(len(s["epoch_tu"])):
            w.writerow([fmt(s["epoch_tu"][k])] + [fmt(v) for v in s["error"][k]]
                       + [fmt(v) for v in s["sigma3"][k]] + [int(s["no_visibility"][k])])


def safe_name(target_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in target_id)


__all__ = ["FAILURE_PENALTY_KM", "HISTOGRAM_GROUPS", "FamilyStats", "Scenario", "ValidationResult",
           "aggregate", "objective", "rmse_position", "rmse_vector", "three_sigma_series", "validate",
           "write_per_target", "write_family_stats", "write_histograms", "write_sigma_series",
           "read_per_target", "stats_from_rows", "family_key", "dro_group", "safe_name"]
