"""Run configuration: defaults, TOML loading and environment overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .catalog import fixture_path
from .cr3bp import CanonicalConstants, IntegratorConfig
from .errors import ConfigError
from .measurement import ARCSEC, FIDELITY_ARCSEC, SensorSpec
from .optimizer import GAConfig
from .tasking import Procedure

SEED_ENV = "SDA_SEED"


@dataclass(frozen=True)
class RunConfig:
    # [run]
    seed: int = 0
    procedure: str = "stp-b"
    n_observers: int = 4
    horizon: float = 8.0
    sigma_dyn: float = 1e-5
    init_perturbation_scale: float = 1.0
    slots_per_orbit: int = 5
    si_max: float = 1.3
    period_max: float = 6.28
    output_dir: str = "results"
    threads: int | None = None
    catalog: str | None = None
    targets: str | None = None
    validation: str | None = None
    mu: float = CanonicalConstants.mu
    du_km: float = CanonicalConstants.du_km
    tu_s: float = CanonicalConstants.tu_s
    abs_tol: float = IntegratorConfig.abs_tol
    rel_tol: float = IntegratorConfig.rel_tol
    # [sensor]
    fidelity: str = "low"
    sigma_arcsec: float | None = None
    max_range_km: float = 500000.0
    cadence: float = 0.02
    # [ga]
    ga: GAConfig = field(default_factory=GAConfig)

    def __post_init__(self):
        try:
            Procedure.parse(self.procedure)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.fidelity not in FIDELITY_ARCSEC:
            raise ConfigError(f"fidelity must be one of {sorted(FIDELITY_ARCSEC)}, got {self.fidelity!r}")
        if self.n_observers < 1 or self.slots_per_orbit < 1:
            raise ConfigError("n_observers and slots_per_orbit must be >= 1")
        if not (self.horizon > 0 and self.cadence > 0 and self.max_range_km > 0):
            raise ConfigError("horizon, cadence and max_range_km must be positive")
        if self.sigma_arcsec is not None and self.sigma_arcsec < 0:
            raise ConfigError("sigma_arcsec must be non-negative")
        for name in ("catalog", "targets", "validation"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} file not found: {p}")

    @property
    def constants(self) -> CanonicalConstants:
        return CanonicalConstants(self.mu, self.du_km, self.tu_s)

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(abs_tol=self.abs_tol, rel_tol=self.rel_tol)

    @property
    def sensor(self) -> SensorSpec:
        arcsec = FIDELITY_ARCSEC[self.fidelity] if self.sigma_arcsec is None else self.sigma_arcsec
        return SensorSpec(arcsec * ARCSEC, self.max_range_km / self.du_km, self.cadence)

    @property
    def catalog_path(self) -> Path:
        return Path(self.catalog) if self.catalog else fixture_path("validation_set.csv")

    @property
    def targets_path(self) -> Path:
        return Path(self.targets) if self.targets else fixture_path("optimization_set.csv")

    @property
    def validation_path(self) -> Path:
        return Path(self.validation) if self.validation else fixture_path("validation_set.csv")

    def replace(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        ga_kw = {k[3:]: kw.pop(k) for k in list(kw) if k.startswith("ga_")}
        cfg = dataclasses.replace(self, **kw)
        if ga_kw:
            cfg = dataclasses.replace(cfg, ga=dataclasses.replace(cfg.ga, **ga_kw))
        return cfg


_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"fidelity", "sigma_arcsec", "max_range_km",
                                                                 "cadence", "ga"}
_SENSOR_KEYS = {"fidelity", "sigma_arcsec", "max_range_km", "cadence"}
_GA_KEYS = {f.name for f in dataclasses.fields(GAConfig)}


def load_config(path=None, env=None) -> RunConfig:
    """Defaults, overlaid by a TOML file, overlaid by ``SDA_SEED``."""
    env = os.environ if env is None else env
    run, sensor, ga = {}, {}, {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        unknown = set(doc) - {"run", "sensor", "ga"}
        if unknown:
            raise ConfigError(f"{p}: unknown section(s) {sorted(unknown)}")
        run, sensor, ga = doc.get("run", {}), doc.get("sensor", {}), doc.get("ga", {})
        for sect, allowed, name in ((run, _RUN_KEYS, "run"), (sensor, _SENSOR_KEYS, "sensor"),
                                    (ga, _GA_KEYS, "ga")):
            bad = set(sect) - allowed
            if bad:
                raise ConfigError(f"{p}: unknown key(s) in [{name}]: {sorted(bad)}")
        base = p.parent
        for key in ("catalog", "targets", "validation"):
            if key in run and not Path(run[key]).is_absolute():
                run[key] = str(base / run[key])
    if env.get(SEED_ENV, "").strip():
        try:
            run["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        return RunConfig(**run, **sensor, ga=GAConfig(**ga))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
