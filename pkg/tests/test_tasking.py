import numpy as np
import pytest
from hypothesis import given, strategies as st

from cislunar_sda.tasking import Procedure, build_schedule, epochs

TU_S = 382981.0


def test_cadences_four_observers():
    assert build_schedule("stp-a", 4, 0.02).system_cadence == 0.02
    assert build_schedule("stp-b", 4, 0.02).system_cadence == 0.005
    assert build_schedule("stp-c", 4, 0.02).system_cadence == 0.01
    assert build_schedule("baseline", 1, 0.02).system_cadence == 0.02


def test_cadence_in_minutes():
    assert 0.02 * TU_S / 60 == pytest.approx(127.66, abs=0.005)


def test_stp_b_sequence():
    s = build_schedule("stp-b", 4)
    assert [next(iter(s.assignment(k))) for k in range(1, 9)] == [0, 1, 2, 3, 0, 1, 2, 3]


def test_stp_c_groups():
    s = build_schedule("stp-c", 5)
    assert s.assignment(1) == {0, 1, 2} and s.assignment(2) == {3, 4}
    s = build_schedule("stp-c", 4, groups=[[1, 3], [0, 2]])
    assert s.assignment(1) == {1, 3}
    with pytest.raises(ValueError):
        build_schedule("stp-c", 4, groups=[[0, 1], [1, 2, 3]])


def test_invalid_parameters():
    with pytest.raises(ValueError):
        build_schedule("stp-d", 4)
    with pytest.raises(ValueError):
        build_schedule("baseline", 2)
    with pytest.raises(ValueError):
        build_schedule("stp-c", 1)
    with pytest.raises(ValueError):
        build_schedule("stp-a", 0)
    assert Procedure.parse("STP-B") is Procedure.STP_B


@pytest.mark.parametrize("proc, n", [("stp-a", 400), ("stp-b", 1600), ("stp-c", 800), ("baseline", 400)])
def test_epoch_counts(proc, n):
    s = build_schedule(proc, 1 if proc == "baseline" else 4)
    e = epochs(s, 8.0)
    assert len(e) == n
    assert e[0] == s.system_cadence
    assert e[-1] == pytest.approx(8.0)


@given(st.sampled_from(["stp-a", "stp-b", "stp-c"]), st.integers(2, 9))
def test_duty_spacing_and_coverage(proc, n_obs):
    s = build_schedule(proc, n_obs)
    mask = s.mask(2.0)
    per_window = round(s.individual_cadence / s.system_cadence)
    for j in range(n_obs):
        ks = np.flatnonzero(mask[:, j])
        assert np.all(np.diff(ks) == per_window)
    # every observer exactly once in each full individual-cadence window
    n = mask.shape[0] - 1
    for start in range(1, n - per_window + 2, per_window):
        assert np.all(mask[start:start + per_window].sum(axis=0) == 1)
