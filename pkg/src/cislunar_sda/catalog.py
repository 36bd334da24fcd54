"""Periodic-orbit catalogs, observer slots and target sets."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cr3bp import (DEFAULT_INTEGRATOR, EARTH_MOON, CanonicalConstants, IntegratorConfig,
                    as_state, propagate, propagate_states, propagate_to_plane_crossing)
from .errors import (CatalogParseError, CatalogSchemaError, EmptyFamilyError, NoCrossingError,
                     SDAError)

log = logging.getLogger(__name__)

PERIODIC_FAMILIES = ("BNO", "BSO", "DRO", "L1NHO", "L1SHO", "L2NHO", "L2SHO",
                     "LPEO", "LPWO", "R1:1O", "R2:1O", "R4:1O")
TRANSFER_FAMILY = "L1TT"
FAMILIES = PERIODIC_FAMILIES + (TRANSFER_FAMILY, "NRHO")

CATALOG_COLUMNS = ("id", "family", "x", "y", "z", "vx", "vy", "vz", "period_tu", "stability_index")
STATE_COLUMNS = CATALOG_COLUMNS[2:8]

DRO_PERIOD_SPLIT = 3.75


@dataclass(frozen=True, eq=False)
class OrbitRecord:
    id: str
    family: str
    ic: np.ndarray
    period: float | None = None
    stability_index: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown orbit family {self.family!r}")
        if self.period is not None and not self.period > 0:
            raise ValueError(f"orbit {self.id}: period must be positive")
        if self.stability_index is not None and not self.stability_index >= 1.0:
            raise ValueError(f"orbit {self.id}: stability index must be >= 1")
        object.__setattr__(self, "ic", as_state(self.ic))

    @property
    def is_transfer(self) -> bool:
        return self.period is None

    def __eq__(self, other):
        if not isinstance(other, OrbitRecord):
            return NotImplemented
        return (self.id == other.id and self.family == other.family
                and np.array_equal(self.ic, other.ic) and self.period == other.period
                and self.stability_index == other.stability_index)

    def __hash__(self):
        return hash((self.id, self.family))

    def __repr__(self):
        return f"OrbitRecord({self.id!r}, {self.family}, period={self.period})"


@dataclass(frozen=True, eq=False)
class OrbitalSlot:
    orbit: OrbitRecord
    phase_index: int
    slots_per_orbit: int
    epoch_state: np.ndarray

    @property
    def orbit_id(self) -> str:
        return self.orbit.id

    @property
    def phase_fraction(self) -> float:
        return self.phase_index / self.slots_per_orbit

    @property
    def key(self) -> str:
        return f"{self.orbit.id}#{self.phase_index}"


@dataclass(frozen=True, eq=False)
class Target:
    """A tracked object: parent record plus the sampled initial state."""

    target_id: str
    record: OrbitRecord
    state: np.ndarray
    phase_time: float = 0.0

    @property
    def family(self) -> str:
        return self.record.family

    @property
    def period(self) -> float | None:
        return self.record.period


@dataclass(frozen=True)
class TargetSet:
    kind: str
    members: tuple

    def __post_init__(self):
        if self.kind not in ("optimization", "validation"):
            raise ValueError(f"target set kind must be optimization|validation, got {self.kind!r}")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def families(self) -> list[str]:
        seen = []
        for m in self.members:
            if m.family not in seen:
                seen.append(m.family)
        return seen


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def _parse_optional(text, name, rownum):
    text = (text or "").strip()
    if text == "" or text.upper() in ("N/A", "NA", "NAN"):
        return None
    try:
        v = float(text)
    except ValueError:
        raise CatalogParseError(f"row {rownum}: column {name!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise CatalogParseError(f"row {rownum}: column {name!r} is not finite")
    return v


def load_catalog(path) -> list[OrbitRecord]:
    """Read a catalog CSV (header ``id,family,x,y,z,vx,vy,vz,period_tu,stability_index``).

    Extra columns are kept on ``OrbitRecord.extra``. Row numbers in error
    messages count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CatalogSchemaError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in CATALOG_COLUMNS if c not in header]
        if missing:
            raise CatalogSchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        records = []
        for rownum, row in enumerate(reader, start=2):
            if None in row:
                raise CatalogParseError(f"{path} row {rownum}: too many fields")
            try:
                ic = []
                for name in STATE_COLUMNS:
                    v = _parse_optional(row[name], name, rownum)
                    if v is None:
                        raise CatalogParseError(f"row {rownum}: column {name!r} is empty")
                    ic.append(v)
                period = _parse_optional(row["period_tu"], "period_tu", rownum)
                si = _parse_optional(row["stability_index"], "stability_index", rownum)
                family = (row["family"] or "").strip()
                extra = {k: v for k, v in row.items() if k not in CATALOG_COLUMNS}
                records.append(OrbitRecord((row["id"] or "").strip(), family, np.array(ic), period, si, extra))
            except CatalogParseError as exc:
                raise CatalogParseError(f"{path}: {exc}") from None
            except (ValueError, TypeError) as exc:
                raise CatalogParseError(f"{path} row {rownum}: {exc}") from None
    return records


def write_catalog(records: Iterable[OrbitRecord], path, extra_columns: Sequence[str] = ()):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CATALOG_COLUMNS) + list(extra_columns))
        for r in records:
            row = [r.id, r.family] + [repr(float(v)) for v in r.ic]
            row.append("" if r.period is None else repr(r.period))
            row.append("" if r.stability_index is None else repr(r.stability_index))
            row += [r.extra.get(c, "") for c in extra_columns]
            w.writerow(row)


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture file (``optimization_set.csv`` etc.)."""
    return Path(str(resources.files("cislunar_sda") / "data" / name))


def load_fixture(name: str) -> list[OrbitRecord]:
    return load_catalog(fixture_path(name))


def load_constellations(path_or_name) -> dict[str, list[OrbitRecord]]:
    """Group a constellation fixture by its ``case`` column (``baseline``, ``stp-a`` ...)."""
    p = Path(path_or_name)
    records = load_catalog(p if p.exists() else fixture_path(str(path_or_name)))
    cases: dict[str, list[OrbitRecord]] = {}
    for r in records:
        cases.setdefault(r.extra.get("case", "default"), []).append(r)
    return cases


# --------------------------------------------------------------------------
# filtering and verification
# --------------------------------------------------------------------------

def filter_catalog(records: Iterable[OrbitRecord], si_max: float = 1.3, period_max: float = 6.28,
                   include_transfers: bool = False) -> list[OrbitRecord]:
    """Keep records with stability index and period at or below the limits.

    Records without a stability index are judged on period alone; transfer
    records (no period) pass only when ``include_transfers`` is set.
    """
    kept = []
    for r in records:
        if r.period is None:
            if include_transfers:
                kept.append(r)
            continue
        if r.period > period_max:
            continue
        if r.stability_index is not None and r.stability_index > si_max:
            continue
        kept.append(r)
    return kept


def family_counts(records: Iterable[OrbitRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.family] = counts.get(r.family, 0) + 1
    return counts


def verify_record(record: OrbitRecord, closure_tol: float = 1e-5, min_moon_distance: float | None = None,
                  min_earth_distance: float | None = None, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                  c: CanonicalConstants = EARTH_MOON) -> str | None:
    """Return a diagnostic string if the orbit fails periodicity or hits a primary, else None."""
    from .measurement import EARTH_RADIUS_KM, MOON_RADIUS_KM

    if record.period is None:
        return None
    r_moon = MOON_RADIUS_KM / c.du_km if min_moon_distance is None else min_moon_distance
    r_earth = EARTH_RADIUS_KM / c.du_km if min_earth_distance is None else min_earth_distance
    try:
        traj = propagate(record.ic, (0.0, record.period), cfg, c)
    except SDAError as exc:
        return f"{record.id}: propagation failed ({exc})"
    pos = traj.states[:, :3]
    d_moon = np.linalg.norm(pos - c.moon_center, axis=1).min()
    d_earth = np.linalg.norm(pos - c.earth_center, axis=1).min()
    if d_moon < r_moon:
        return f"{record.id}: intersects the Moon (closest approach {d_moon * c.du_km:.1f} km)"
    if d_earth < r_earth:
        return f"{record.id}: intersects the Earth (closest approach {d_earth * c.du_km:.1f} km)"
    closure = float(np.abs(traj.final_state - record.ic).max())
    if closure > closure_tol:
        return f"{record.id}: closure error {closure:.3g} exceeds {closure_tol:.3g}"
    return None


def verify_catalog(records: Iterable[OrbitRecord], closure_tol: float = 1e-5, **kw):
    """Split records into (kept, diagnostics) by :func:`verify_record`."""
    kept, diagnostics = [], []
    for r in records:
        msg = verify_record(r, closure_tol, **kw)
        if msg is None:
            kept.append(r)
        else:
            log.warning("excluding orbit: %s", msg)
            diagnostics.append(msg)
    return kept, diagnostics


# --------------------------------------------------------------------------
# slots and targets
# --------------------------------------------------------------------------

def generate_slots(records: Iterable[OrbitRecord], slots_per_orbit: int = 5,
                   cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                   c: CanonicalConstants = EARTH_MOON) -> list[OrbitalSlot]:
    if slots_per_orbit < 1:
        raise ValueError("slots_per_orbit must be >= 1")
    slots = []
    for r in records:
        if r.period is None:
            raise ValueError(f"orbit {r.id} has no period; transfers cannot host slots")
        times = [k * r.period / slots_per_orbit for k in range(slots_per_orbit)]
        try:
            states = propagate_states(r.ic, times, cfg, c)
        except SDAError as exc:
            raise type(exc)(f"orbit {r.id}: {exc}") from exc
        for k in range(slots_per_orbit):
            slots.append(OrbitalSlot(r, k, slots_per_orbit, states[k]))
    return slots


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from ints/strings, stable across processes."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode()))
        else:
            words.append(int(p) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def sample_phase_time(record: OrbitRecord, seed) -> float:
    if record.period is None:
        raise ValueError(f"orbit {record.id} has no period")
    rng = np.random.default_rng(seed)
    return float(rng.uniform(0.0, record.period))


def sample_target_phase(record: OrbitRecord, seed, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                        c: CanonicalConstants = EARTH_MOON) -> np.ndarray:
    """IC propagated to a uniformly drawn phase in ``[0, period)``."""
    u = sample_phase_time(record, seed)
    return propagate_states(record.ic, [0.0, u], cfg, c)[-1]


def make_targets(records: Iterable[OrbitRecord], kind: str, seed: int = 0, replicas: int = 1,
                 cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                 c: CanonicalConstants = EARTH_MOON) -> TargetSet:
    """Turn records into targets, sampling a random phase for each periodic one.

    Transfer records keep their catalog IC (they start on the x = 0 plane).
    With ``replicas > 1`` each record yields several independently phased
    targets, suffixed ``~1``, ``~2`` ...
    """
    members = []
    for r in records:
        for rep in range(replicas):
            tid = r.id if replicas == 1 else f"{r.id}~{rep}"
            if r.period is None:
                members.append(Target(tid, r, r.ic.copy(), 0.0))
                continue
            u = sample_phase_time(r, stable_seed(seed, "phase", tid))
            state = propagate_states(r.ic, [0.0, u], cfg, c)[-1]
            members.append(Target(tid, r, state, u))
    return TargetSet(kind, tuple(members))


def stratified_targets(records: Sequence[OrbitRecord], n: int, seed: int = 0,
                       cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                       c: CanonicalConstants = EARTH_MOON) -> TargetSet:
    """``n`` validation targets spread evenly over families.

    Each family gets ``n // F`` targets (the remainder goes to randomly
    chosen families). Within a family the orbits are cycled in shuffled
    order, and each pick gets its own random phase, so an orbit may appear
    several times at different points along it.
    """
    by_family: dict[str, list[OrbitRecord]] = {}
    for r in records:
        by_family.setdefault(r.family, []).append(r)
    fams = sorted(by_family)
    if not fams or n < 1:
        return TargetSet("validation", ())
    rng = np.random.default_rng(stable_seed(seed, "stratify"))
    quota = {f: n // len(fams) for f in fams}
    for f in rng.choice(fams, size=n % len(fams), replace=False):
        quota[str(f)] += 1
    members = []
    for f in fams:
        pool = sorted(by_family[f], key=lambda r: r.id)
        order = rng.permutation(len(pool))
        for j in range(quota[f]):
            r = pool[order[j % len(pool)]]
            tid = f"{r.id}~{j}"
            if r.period is None:
                members.append(Target(tid, r, r.ic.copy(), 0.0))
                continue
            u = sample_phase_time(r, stable_seed(seed, "phase", tid))
            members.append(Target(tid, r, propagate_states(r.ic, [0.0, u], cfg, c)[-1], u))
    return TargetSet("validation", tuple(members))


def build_optimization_set(validation: Sequence[OrbitRecord], transfers: Sequence[OrbitRecord],
                           n_transfers: int = 3) -> list[OrbitRecord]:
    """Shortest, longest and (lower) median period orbit of each family plus transfers.

    Families with fewer than three orbits contribute all they have and log a
    warning; a family with no orbits at all is an error.
    """
    by_family: dict[str, list[OrbitRecord]] = {f: [] for f in PERIODIC_FAMILIES}
    for r in validation:
        if r.period is not None and r.family in by_family:
            by_family[r.family].append(r)
    chosen = []
    for fam in PERIODIC_FAMILIES:
        members = sorted(by_family[fam], key=lambda r: (r.period, r.id))
        if not members:
            raise EmptyFamilyError(f"family {fam} has no periodic orbits")
        if len(members) < 3:
            log.warning("family %s has only %d orbit(s); selecting all", fam, len(members))
            chosen.extend(members)
            continue
        picks = [0, (len(members) - 1) // 2, len(members) - 1]
        chosen.extend(members[i] for i in sorted(set(picks)))
    tt = list(transfers)[:n_transfers]
    if len(tt) < n_transfers:
        log.warning("only %d transfer record(s) available", len(tt))
    return chosen + tt


def _monodromy(state, period, cfg, c, eps=1e-7):
    M = np.empty((6, 6))
    for j in range(6):
        dp = state.copy()
        dm = state.copy()
        dp[j] += eps
        dm[j] -= eps
        M[:, j] = (propagate_states(dp, [0.0, period], cfg, c)[-1]
                   - propagate_states(dm, [0.0, period], cfg, c)[-1]) / (2 * eps)
    return M


def generate_transfers(halo: OrbitRecord, count: int = 19, manifold_offset: float = 1e-6,
                       max_horizon: float = 40.0, cfg: IntegratorConfig = DEFAULT_INTEGRATOR,
                       c: CanonicalConstants = EARTH_MOON) -> list[OrbitRecord]:
    """Transfer ICs on the ``x = 0`` plane from ``count`` evenly phased halo points.

    Each point is displaced by ``manifold_offset`` DU along the stable
    eigenvector of the monodromy matrix (trying both branches) and then
    propagated backward to the plane. ``manifold_offset=0`` backpropagates
    the raw halo points, which only leave the orbit through accumulated
    numerical error.
    """
    if halo.period is None:
        raise ValueError("transfer generation needs a periodic halo record")
    phases = [k * halo.period / count for k in range(count)]
    points = propagate_states(halo.ic, phases, cfg, c)
    out = []
    for k, p in enumerate(points):
        candidates = [p]
        if manifold_offset > 0:
            w, V = np.linalg.eig(_monodromy(p, halo.period, cfg, c))
            stable = np.real(V[:, np.argmin(np.abs(w))])
            stable /= np.linalg.norm(stable[:3])
            candidates = [p + manifold_offset * stable, p - manifold_offset * stable]
        last_exc = None
        for cand in candidates:
            try:
                state, t = propagate_to_plane_crossing(cand, cfg, c, direction=-1, max_horizon=max_horizon)
            except NoCrossingError as exc:
                last_exc = exc
                continue
            state = state.copy()
            state[0] = 0.0
            out.append(OrbitRecord(f"{halo.id}-tt{k:02d}", TRANSFER_FAMILY, state, None, None,
                                   {"source_phase": repr(phases[k]), "crossing_time": repr(t)}))
            break
        else:
            raise NoCrossingError(f"halo point {k} of {halo.id}: {last_exc}")
    return out


def dro_group(record: OrbitRecord, split: float = DRO_PERIOD_SPLIT) -> str:
    """``DRO-short`` / ``DRO-long`` label for DROs, the family otherwise."""
    if record.family != "DRO" or record.period is None:
        return record.family
    return "DRO-long" if record.period > split else "DRO-short"
