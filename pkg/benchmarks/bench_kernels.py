"""Time the hot kernels with numba and with the pure-numpy fallback.

Each backend runs in its own interpreter, since the choice is fixed at
import time by ``SDA_DISABLE_NUMBA``. The compiled run is warmed up first so
the table reports steady-state cost, not JIT compilation.

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from cislunar_sda import _accel
from cislunar_sda.catalog import load_constellations
from cislunar_sda.cr3bp import propagate_states
from cislunar_sda.ekf import NoiseModel, run_track
from cislunar_sda.measurement import SensorSpec, visibility
from cislunar_sda.tasking import build_schedule

repeat = int(sys.argv[1])
ic = np.array([1.01059, -0.02336, 0.15508, -0.03225, -0.07038, -0.15740])
sched = build_schedule("stp-b", 4)
obs = load_constellations("constellations_lofi.csv")["stp-b"]
noise = NoiseModel.for_schedule(sched, SensorSpec())
rng = np.random.default_rng(0)
pairs = rng.uniform(-1.5, 1.5, (2000, 2, 3))

cases = {
    "propagate 8 TU (401 samples)": lambda: propagate_states(ic, np.linspace(0, 8, 401)),
    "visibility x2000": lambda: [visibility(o, t) for o, t in pairs],
    "EKF track 1 TU, STP-B": lambda: run_track(ic, obs, sched, noise, 1.0, seed=1),
}
out = {"numba": _accel.USE_NUMBA}
for name, fn in cases.items():
    fn()  # warm-up (JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out[name] = best
print(json.dumps(out))
"""


def run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("SDA_DISABLE_NUMBA", None)
    if disable:
        env["SDA_DISABLE_NUMBA"] = "1"
    r = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                       text=True, check=True)
    return json.loads(r.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    fast = run(False, args.repeat)
    slow = run(True, args.repeat)
    if not fast.pop("numba"):
        print("numba is not importable; both columns use the fallback", file=sys.stderr)
    slow.pop("numba")
    print(f"{'kernel':34s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}")
    for name in fast:
        print(f"{name:34s} {fast[name]:10.4f} {slow[name]:10.4f} {slow[name] / fast[name]:8.1f}x")


if __name__ == "__main__":
    main()
