import json
import subprocess
import sys

import pytest

from cislunar_sda.catalog import load_catalog
from cislunar_sda.cli import main
from cislunar_sda.config import RunConfig, load_config
from cislunar_sda.errors import ConfigError
from cislunar_sda.measurement import ARCSEC


def test_defaults():
    cfg = load_config(None, env={})
    assert cfg.seed == 0 and cfg.procedure == "stp-b" and cfg.n_observers == 4
    assert cfg.sensor.sigma_angle == pytest.approx(192.0118 * ARCSEC)
    assert cfg.ga.population == 50


def test_toml_sections(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[run]\nseed = 7\nprocedure = "stp-c"\nhorizon = 2.0\n'
                 '[sensor]\nfidelity = "high"\n[ga]\npopulation = 12\n')
    cfg = load_config(p, env={})
    assert (cfg.seed, cfg.procedure, cfg.horizon, cfg.ga.population) == (7, "stp-c", 2.0, 12)
    assert cfg.sensor.sigma_angle == pytest.approx(26.7518 * ARCSEC)
    assert load_config(p, env={"SDA_SEED": "42"}).seed == 42


@pytest.mark.parametrize("text", ['[run]\nsede = 1\n', '[runs]\nseed = 1\n', '[run]\nprocedure = "stp-z"\n',
                                  '[sensor]\nfidelity = "medium"\n', '[ga]\npopulation = 1\n', 'seed = = 1'])
def test_bad_config(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p, env={})


def test_bad_env_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, env={"SDA_SEED": "abc"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml", env={})


def test_replace_routes_ga_keys():
    cfg = RunConfig().replace(seed=3, ga_population=10, horizon=None)
    assert cfg.seed == 3 and cfg.ga.population == 10 and cfg.horizon == 8.0


def test_catalog_command(tmp_path, capsys):
    assert main(["catalog", "--out", str(tmp_path), "--slots-per-orbit", "1"]) == 0
    slots = load_catalog(tmp_path / "slots.csv")
    kept = load_catalog(tmp_path / "filtered_catalog.csv")
    assert len(slots) == len(kept) > 0
    assert all(s.extra["phase_index"] == "0" for s in slots)
    assert (tmp_path / "run_metadata.json").exists()
    assert "slots" in capsys.readouterr().out


def test_exit_codes(tmp_path):
    assert main(["catalog", "--catalog", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("id,family\n")
    assert main(["catalog", "--catalog", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["report", str(tmp_path)]) == 2
    assert main(["track", "--config", str(tmp_path / "nope.toml")]) == 2
    # more observers than slots
    assert main(["optimize", "--out", str(tmp_path), "--n", "500", "--slots-per-orbit", "1"]) == 4


def test_report_on_empty_per_target(tmp_path):
    (tmp_path / "per_target.csv").write_text("target_id,family,period_tu,rmse_pos_km,rmse_vec_pos_km,"
                                             "rmse_vel_kms,visibility_fraction,error\n")
    assert main(["report", str(tmp_path)]) == 2


def test_track_byte_identical(tmp_path):
    args = ["track", "--target-id", "lofi-stp-b-best", "--horizon", "1.0", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("track_lofi-stp-b-best.csv", "sigma_lofi-stp-b-best.csv", "track_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(args[:-1] + ["4", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "track_lofi-stp-b-best.csv").read_bytes() != \
        (tmp_path / "c" / "track_lofi-stp-b-best.csv").read_bytes()


def test_track_unknown_case_and_target(tmp_path):
    assert main(["track", "--case", "stp-q", "--out", str(tmp_path)]) == 2
    assert main(["track", "--target-id", "nope", "--out", str(tmp_path)]) == 2


def test_validate_then_report(tmp_path):
    out = tmp_path / "v"
    assert main(["validate", "--out", str(out), "--n-targets", "26", "--horizon", "0.5", "--threads", "1"]) == 0
    stats = json.loads((out / "family_stats.json").read_text())
    assert len([f for f in stats if not f.startswith("DRO-")]) == 13
    assert {"DRO-short", "DRO-long"} <= set(stats)
    before = (out / "family_stats.json").read_bytes()
    assert main(["report", str(out)]) == 0
    assert (out / "family_stats.json").read_bytes() == before
    assert (out / "visibility_by_family.csv").exists()
    assert list(out.glob("sigma_*.csv"))


def test_optimize_small_with_exhaustive_check(tmp_path):
    out = tmp_path / "o"
    common = ["optimize", "--out", str(out), "--n", "2", "--max-targets", "2", "--horizon", "0.3",
              "--slots-per-orbit", "1", "--si-max", "1.0001", "--period-max", "1.5",
              "--population", "6", "--threads", "1"]
    code = main(common + ["--exhaustive-check"])
    info = json.loads((out / "optimize_result.json").read_text())
    assert code == (0 if float(info["relative_gap"]) <= 0.05 else 3)
    assert len(load_catalog(out / "best_constellation.csv")) == 2
    assert (out / "checkpoint.json").exists() and (out / "ga_history.csv").exists()


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "cislunar_sda.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("catalog", "track", "optimize", "validate", "report"):
        assert cmd in r.stdout
