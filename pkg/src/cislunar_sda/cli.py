"""Command-line entry point: ``sda {catalog,track,optimize,validate,report}``."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import (OrbitRecord, Target, TargetSet, family_counts, filter_catalog, fixture_path,
                      generate_slots, load_catalog, load_constellations, make_targets,
                      stratified_targets, verify_catalog, write_catalog)
from .config import RunConfig, load_config
from .ekf import NoiseModel, fmt
from .errors import (CapExceededError, ConfigError, CatalogError, InfeasibleError, SDAError)
from .harness import (Scenario, aggregate, read_per_target, safe_name, stats_from_rows,
                      write_family_stats, write_histograms, write_per_target, write_sigma_series)
from .optimizer import exhaustive_search, optimize, scenario_fitness
from .tasking import build_schedule

log = logging.getLogger("cislunar_sda")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4
SLOT_EXTRA = ("orbit_id", "phase_index")


def _read_records(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"file not found: {p}")
    return load_catalog(p)


def _metadata(out: Path, command: str, argv):
    meta = {"command": command, "argv": list(argv), "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    (out / "run_metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


def _outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _schedule_and_noise(cfg: RunConfig, n_observers: int):
    schedule = build_schedule(cfg.procedure, n_observers, cfg.cadence)
    noise = NoiseModel(cfg.sigma_dyn, schedule.system_cadence, cfg.sensor.sigma_angle,
                       cfg.init_perturbation_scale)
    return schedule, noise


def _observers(args, cfg):
    """Observer records from ``--observers`` (optionally one ``case`` of a constellation file)."""
    path = args.observers
    if path is None:
        path = fixture_path("baseline_nrho.csv" if cfg.procedure == "baseline" else "constellations_lofi.csv")
    if not Path(path).exists():
        raise ConfigError(f"file not found: {path}")
    cases = load_constellations(path)
    case = args.case or (cfg.procedure if cfg.procedure in cases else None)
    if case is None:
        if len(cases) != 1:
            raise ConfigError(f"{path} holds cases {sorted(cases)}; choose one with --case")
        case = next(iter(cases))
    if case not in cases:
        raise ConfigError(f"{path} has no case {case!r}; available: {sorted(cases)}")
    return cases[case]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_catalog(args, cfg: RunConfig) -> int:
    records = _read_records(args.catalog or cfg.catalog_path)
    kept = filter_catalog(records, cfg.si_max, cfg.period_max, include_transfers=args.include_transfers)
    if args.verify is not None:
        kept, diags = verify_catalog(kept, args.verify, cfg=cfg.integrator, c=cfg.constants)
        for d in diags:
            print(f"excluded: {d}", file=sys.stderr)
    out = _outdir(args, cfg)
    write_catalog(kept, out / "filtered_catalog.csv")
    periodic = [r for r in kept if r.period is not None]
    slots = generate_slots(periodic, cfg.slots_per_orbit, cfg.integrator, cfg.constants)
    with open(out / "slots.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "family", "x", "y", "z", "vx", "vy", "vz", "period_tu", "stability_index",
                    *SLOT_EXTRA])
        for s in slots:
            r = s.orbit
            w.writerow([s.key, r.family, *(repr(float(v)) for v in s.epoch_state),
                        repr(r.period), "" if r.stability_index is None else repr(r.stability_index),
                        r.id, s.phase_index])
    counts = family_counts(kept)
    for fam in sorted(counts):
        print(f"{fam:8s} {counts[fam]}")
    print(f"{len(kept)} orbits, {len(slots)} slots -> {out / 'slots.csv'}")
    _metadata(out, "catalog", args.argv)
    return EXIT_OK


def _target_from_args(args, cfg):
    if args.target_file:
        recs = _read_records(args.target_file)
    else:
        recs = load_catalog(fixture_path("best_worst_lofi.csv"))
    if args.target_id:
        recs = [r for r in recs if r.id == args.target_id]
        if not recs:
            raise ConfigError(f"no target with id {args.target_id!r}")
    rec = recs[0]
    if args.random_phase and rec.period is not None:
        return make_targets([rec], "validation", cfg.seed, cfg=cfg.integrator, c=cfg.constants).members[0]
    return Target(rec.id, rec, rec.ic.copy(), 0.0)


def cmd_track(args, cfg: RunConfig) -> int:
    observers = _observers(args, cfg)
    target = _target_from_args(args, cfg)
    if args.init_error is not None:
        cfg = cfg.replace(init_perturbation_scale=args.init_error)
    schedule, noise = _schedule_and_noise(cfg, len(observers))
    out = _outdir(args, cfg)
    rmses = []
    for rep in range(args.replicates):
        sc = Scenario(TargetSet("optimization", (target,)), schedule, noise, cfg.sensor, cfg.horizon,
                      cfg.seed + rep, cfg.integrator, cfg.constants, threads=1)
        tr = sc.track(observers, target)
        if tr.error_flag:
            print(f"track failed: {tr.error_message}", file=sys.stderr)
            return EXIT_NUMERIC
        rmses.append(tr.rmse_pos)
        if rep == 0:
            tr.to_csv(out / f"track_{safe_name(target.target_id)}.csv")
            write_sigma_series(tr, out / f"sigma_{safe_name(target.target_id)}.csv")
            summary = {"target_id": target.target_id, "family": target.family, "seed": cfg.seed,
                       "rmse_pos_km": fmt(tr.rmse_pos), "rmse_vec_pos_km": fmt(tr.rmse_vec_pos),
                       "rmse_vel_kms": fmt(tr.rmse_vel), "visibility_fraction": fmt(tr.visibility_fraction)}
    summary["replicates"] = args.replicates
    summary["median_rmse_pos_km"] = fmt(float(np.median(rmses)))
    (out / "track_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{target.target_id}: RMSE {fmt(rmses[0])} km (median over {len(rmses)} seed(s): "
          f"{fmt(float(np.median(rmses)))} km)")
    _metadata(out, "track", args.argv)
    return EXIT_OK


def _load_slots(args, cfg):
    if args.slots:
        return _read_records(args.slots)
    recs = filter_catalog(_read_records(cfg.catalog_path), cfg.si_max, cfg.period_max)
    slots = generate_slots(recs, cfg.slots_per_orbit, cfg.integrator, cfg.constants)
    return [_slot_record(s) for s in slots]


def _slot_record(s):
    return OrbitRecord(s.key, s.orbit.family, s.epoch_state, s.orbit.period, s.orbit.stability_index,
                       {"orbit_id": s.orbit.id, "phase_index": str(s.phase_index)})


def cmd_optimize(args, cfg: RunConfig) -> int:
    slots = _load_slots(args, cfg)
    n = args.n or cfg.n_observers
    if n > len(slots):
        raise InfeasibleError(f"{n} observers requested but only {len(slots)} slots available")
    targets_rec = _read_records(args.targets or cfg.targets_path)
    if args.max_targets:
        targets_rec = targets_rec[:args.max_targets]
    targets = make_targets(targets_rec, "optimization", cfg.seed, cfg=cfg.integrator, c=cfg.constants)
    schedule, noise = _schedule_and_noise(cfg, n)
    threads = args.threads or cfg.threads
    scenario = Scenario(targets, schedule, noise, cfg.sensor, cfg.horizon, cfg.seed, cfg.integrator,
                        cfg.constants, threads=threads)
    fitness = scenario_fitness(scenario, slots)
    out = _outdir(args, cfg)
    ckpt = out / "checkpoint.json"
    result = optimize(slots, n, fitness, cfg.ga, threads=1, checkpoint=ckpt, resume=args.resume)
    best = [slots[i] for i in result.best.slots]
    write_catalog([_relabel(r, cfg.procedure, k) for k, r in enumerate(best, 1)],
                  out / "best_constellation.csv", ("case", "slot_id", "orbit_id", "phase_index"))
    with open(out / "ga_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_fitness_km"])
        for g, v in enumerate(result.history):
            w.writerow([g, fmt(v)])
    info = {"best_slots": [r.id for r in best], "best_fitness_km": fmt(result.best_fitness),
            "generations": result.generations, "evaluations": result.evaluations,
            "cache_hits": result.cache_hits, "stop_reason": result.stop_reason,
            "n_observers": n, "procedure": cfg.procedure, "seed": cfg.seed}
    code = EXIT_OK
    if args.exhaustive_check:
        ex_best, table = exhaustive_search(len(slots), n, fitness)
        ex_fit = table[ex_best.slots]
        rel = (result.best_fitness - ex_fit) / ex_fit if ex_fit > 0 else 0.0
        info.update({"exhaustive_best_slots": [slots[i].id for i in ex_best.slots],
                     "exhaustive_best_fitness_km": fmt(ex_fit), "relative_gap": fmt(rel)})
        print(f"exhaustive optimum {fmt(ex_fit)} km; GA gap {rel:.3%}")
        if rel > 0.05:
            code = EXIT_NUMERIC
    (out / "optimize_result.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"best {info['best_slots']} objective {info['best_fitness_km']} km "
          f"({result.generations} generations, {result.stop_reason})")
    _metadata(out, "optimize", args.argv)
    return code


def _relabel(r, case, k):
    extra = {"case": case, "slot_id": r.id, "orbit_id": r.extra.get("orbit_id", r.id),
             "phase_index": r.extra.get("phase_index", "0")}
    return OrbitRecord(f"{case}-{k}", r.family, r.ic, r.period, r.stability_index, extra)


def cmd_validate(args, cfg: RunConfig) -> int:
    observers = _observers(args, cfg)
    records = _read_records(args.validation or cfg.validation_path)
    if args.n_targets:
        targets = stratified_targets(records, args.n_targets, cfg.seed, cfg.integrator, cfg.constants)
    else:
        targets = make_targets(records, "validation", cfg.seed, cfg=cfg.integrator, c=cfg.constants)
    schedule, noise = _schedule_and_noise(cfg, len(observers))
    scenario = Scenario(targets, schedule, noise, cfg.sensor, cfg.horizon, cfg.seed, cfg.integrator,
                        cfg.constants, threads=args.threads or cfg.threads)
    tracks = scenario.tracks(observers)
    res = aggregate(tracks, args.dro_split)
    out = _outdir(args, cfg)
    write_per_target(tracks, out / "per_target.csv")
    # stats from the written rows, so `report` on this directory reproduces them exactly
    stats = stats_from_rows(read_per_target(out / "per_target.csv"), args.dro_split)
    write_family_stats(stats, out / "family_stats.json")
    write_histograms(res.histograms, out / "histograms.csv")
    good = [t for t in tracks if not t.error_flag and t.n_epochs >= 1]
    if good:
        ranked = sorted(good, key=lambda t: (t.rmse_pos, t.target_id))
        for t in {ranked[0].target_id: ranked[0], ranked[-1].target_id: ranked[-1]}.values():
            write_sigma_series(t, out / f"sigma_{safe_name(t.target_id)}.csv")
    _print_stats(stats)
    if res.skipped:
        print(f"{res.skipped} track(s) failed and were skipped", file=sys.stderr)
    _metadata(out, "validate", args.argv)
    return EXIT_OK


def _print_stats(stats):
    print(f"{'family':10s} {'n':>4s} {'median km':>12s} {'mean km':>12s} {'visibility':>10s}")
    for fam in sorted(stats):
        s = stats[fam]
        print(f"{fam:10s} {s.count:4d} {s.median:12.4g} {s.mean:12.4g} {s.mean_visibility:10.3f}")


def cmd_report(args, cfg: RunConfig) -> int:
    res_dir = Path(args.results)
    per_target = res_dir / "per_target.csv"
    if not per_target.exists():
        raise ConfigError(f"no per_target.csv in {res_dir}")
    rows = read_per_target(per_target)
    if not rows:
        raise ConfigError(f"{per_target} has no rows")
    stats = stats_from_rows(rows, args.dro_split)
    out = Path(args.out) if args.out else res_dir
    out.mkdir(parents=True, exist_ok=True)
    write_family_stats(stats, out / "family_stats.json")
    with open(out / "visibility_by_family.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "count", "mean_visibility_fraction"])
        for fam in sorted(stats):
            w.writerow([fam, stats[fam].count, fmt(stats[fam].mean_visibility)])
    _print_stats(stats)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _dro_split(text):
    if text.lower() in ("none", "off", ""):
        return None
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sda", description="Cislunar observer constellation design and analysis")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output directory (default: [run] output_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker thread cap")
    common.add_argument("--procedure", choices=["baseline", "stp-a", "stp-b", "stp-c"])
    common.add_argument("--fidelity", choices=["low", "high"])
    common.add_argument("--sigma-angle", type=float, dest="sigma_arcsec", help="angle noise, arcsec")
    common.add_argument("--horizon", type=float, help="simulation horizon, TU")
    common.add_argument("--si-max", type=float)
    common.add_argument("--period-max", type=float)
    common.add_argument("--slots-per-orbit", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("catalog", parents=[common], help="filter a catalog and generate observer slots")
    c.add_argument("--catalog", help="catalog CSV (default: bundled validation fixture)")
    c.add_argument("--include-transfers", action="store_true")
    c.add_argument("--verify", type=float, nargs="?", const=1e-5, default=None, metavar="TOL",
                   help="drop orbits failing periodic closure at TOL or hitting a primary")

    t = sub.add_parser("track", parents=[common], help="track one target with a fixed constellation")
    t.add_argument("--observers", help="constellation CSV (catalog schema, optional case column)")
    t.add_argument("--case", help="case to select from the constellation file")
    t.add_argument("--target-file", help="catalog CSV holding the target (default: bundled best/worst)")
    t.add_argument("--target-id")
    t.add_argument("--random-phase", action="store_true", help="start the target at a seeded random phase")
    t.add_argument("--init-error", type=float, help="initial-error scale (0 starts on the truth)")
    t.add_argument("--replicates", type=int, default=1, help="number of consecutive seeds to run")

    o = sub.add_parser("optimize", parents=[common], help="GA search for the best N-slot constellation")
    o.add_argument("--slots", help="slots CSV from `catalog` (default: generated from the catalog)")
    o.add_argument("--targets", help="optimization target CSV (default: bundled optimization set)")
    o.add_argument("--max-targets", type=int, help="use only the first K targets")
    o.add_argument("--n", type=int, help="number of observers")
    o.add_argument("--exhaustive-check", action="store_true")
    o.add_argument("--resume", action="store_true", help="resume from OUT/checkpoint.json")
    o.add_argument("--population", type=int, dest="ga_population")
    o.add_argument("--max-generations", type=int, dest="ga_max_generations")
    o.add_argument("--stall-generations", type=int, dest="ga_stall_generations")

    v = sub.add_parser("validate", parents=[common], help="evaluate a constellation on the validation set")
    v.add_argument("--observers", help="constellation CSV")
    v.add_argument("--case")
    v.add_argument("--validation", help="validation catalog CSV")
    v.add_argument("--n-targets", type=int, help="stratified subsample size")
    v.add_argument("--dro-split", type=_dro_split, default=3.75)

    r = sub.add_parser("report", parents=[common], help="recompute statistics from a validation run")
    r.add_argument("results", help="directory holding per_target.csv")
    r.add_argument("--dro-split", type=_dro_split, default=3.75)
    return p


COMMANDS = {"catalog": cmd_catalog, "track": cmd_track, "optimize": cmd_optimize,
            "validate": cmd_validate, "report": cmd_report}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {k: getattr(args, k, None) for k in
                     ("seed", "threads", "procedure", "fidelity", "sigma_arcsec", "horizon", "si_max",
                      "period_max", "slots_per_orbit", "ga_population", "ga_max_generations",
                      "ga_stall_generations")}
        cfg = cfg.replace(**overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CatalogError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleError, CapExceededError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SDAError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
