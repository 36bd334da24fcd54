import sys

import numpy as np
import pytest

from cislunar_sda.catalog import load_constellations, load_fixture

MU = 0.0121506
DU_KM = 389703.0


@pytest.fixture(scope="session")
def ots():
    return load_fixture("optimization_set.csv")


@pytest.fixture(scope="session")
def lofi_constellations():
    return load_constellations("constellations_lofi.csv")


@pytest.fixture(scope="session")
def best_worst_lofi():
    return {r.id: r for r in load_fixture("best_worst_lofi.csv")}


def random_states(n, seed, min_dist=0.05):
    """States away from both primaries, for derivative checks."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        s = np.concatenate([rng.uniform([-1.5, -1.5, -0.5], [1.5, 1.5, 0.5]), rng.uniform(-1, 1, 3)])
        r1 = np.linalg.norm(s[:3] - [-MU, 0, 0])
        r2 = np.linalg.norm(s[:3] - [1 - MU, 0, 0])
        if r1 > min_dist and r2 > min_dist:
            out.append(s)
    return np.array(out)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[n])
