import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cislunar_sda.errors import CapExceededError, ConfigError, InfeasibleError
from cislunar_sda.optimizer import (ConstellationGenome, FitnessCache, GAConfig, GeneticOptimizer,
                                    crossover, exhaustive_search, mutate, optimize, repair,
                                    stochastic_uniform)


def table_fitness(n_slots, seed):
    """Random but fixed fitness: slot scores plus a pairwise interaction term."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(0, 1, n_slots)
    pair = rng.uniform(0, 0.3, (n_slots, n_slots))

    def f(g):
        s = list(g.slots)
        return float(w[s].sum() + sum(pair[i, j] for i, j in itertools.combinations(s, 2)))
    return f


def test_genome_canonical():
    g = ConstellationGenome((5, 1, 3))
    assert g.slots == (1, 3, 5)
    assert g == ConstellationGenome([3, 5, 1])
    assert list(g.as_binary(6)) == [0, 1, 0, 1, 0, 1]
    with pytest.raises(ValueError):
        ConstellationGenome((1, 1))
    with pytest.raises(ValueError):
        g.check(3, 5)
    with pytest.raises(ValueError):
        g.check(2, 10)


def test_repair_examples():
    rng = np.random.default_rng(0)
    assert repair([0, 2], 2, 5, rng).slots == (0, 2)
    g = repair([0, 1, 2, 3], 2, 5, rng)
    assert len(g) == 2 and set(g.slots) <= {0, 1, 2, 3}
    g = repair([4], 3, 5, rng, pool=[0, 1])
    assert g.slots == (0, 1, 4)
    g = repair([4, 4, 9], 3, 5, rng)
    assert len(g) == 3 and 4 in g.slots and all(0 <= i < 5 for i in g.slots)
    with pytest.raises(InfeasibleError):
        repair([], 6, 5, rng)


@settings(max_examples=200)
@given(st.lists(st.integers(-3, 30), max_size=20), st.integers(1, 12), st.integers(0, 10_000))
def test_repair_property(candidate, n, seed):
    n_slots = 12
    g = repair(candidate, n, n_slots, np.random.default_rng(seed))
    g.check(n, n_slots)


@settings(max_examples=100)
@given(st.integers(2, 15), st.data())
def test_operators_preserve_size(n_slots, data):
    n = data.draw(st.integers(1, n_slots))
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    a = repair([], n, n_slots, rng)
    b = repair([], n, n_slots, rng)
    child = crossover(a, b, n_slots, rng)
    child.check(n, n_slots)
    # crossover never invents slots outside the parents
    assert set(child.slots) <= set(a.slots) | set(b.slots)
    m = mutate(a, n_slots, rng)
    m.check(n, n_slots)
    if n < n_slots:
        assert len(set(m.slots) ^ set(a.slots)) == 2


def test_stochastic_uniform_proportions():
    w = np.array([0.5, 0.3, 0.2])
    picks = stochastic_uniform(w, 10, np.random.default_rng(1))
    counts = np.bincount(picks, minlength=3)
    assert np.all(np.abs(counts - 10 * w) <= 1)


def test_cache_hits_and_disabled():
    calls = []
    cache = FitnessCache(lambda g: calls.append(g.slots) or float(sum(g.slots)))
    assert cache(ConstellationGenome((3, 1))) == 4.0
    assert cache(ConstellationGenome((1, 3))) == 4.0
    assert cache.hits == 1 and cache.misses == 1 and len(calls) == 1
    off = FitnessCache(lambda g: calls.append(g.slots) or 0.0, enabled=False)
    off(ConstellationGenome((1,)))
    off(ConstellationGenome((1,)))
    assert off.hits == 0 and off.misses == 2 and off.table == {}


def test_exhaustive_counts_and_cap():
    best, table = exhaustive_search(6, 3, lambda g: float(sum(g.slots)))
    assert len(table) == math.comb(6, 3) == 20
    assert best.slots == (0, 1, 2)
    with pytest.raises(CapExceededError):
        exhaustive_search(60, 5, lambda g: 0.0, cap=1000)
    with pytest.raises(InfeasibleError):
        exhaustive_search(3, 4, lambda g: 0.0)


def test_ga_config_validation():
    assert GAConfig().elites == 3
    assert GAConfig().generations_for(30) == 3000
    with pytest.raises(ConfigError):
        GAConfig(population=1)
    with pytest.raises(ConfigError):
        GAConfig(selection_pressure=2.5)


@pytest.mark.parametrize("n_slots, n", [(8, 2), (10, 3), (12, 4), (15, 2), (9, 9), (7, 1)])
def test_ga_matches_exhaustive(n_slots, n):
    for seed in range(3):
        f = table_fitness(n_slots, seed)
        best, table = exhaustive_search(n_slots, n, f)
        res = optimize(n_slots, n, f, GAConfig(seed=seed))
        assert res.best_fitness == pytest.approx(table[best.slots], abs=1e-12)
        assert len(res.best) == n


def test_ga_larger_instance_near_exhaustive():
    n_slots, n = 20, 4  # 4845 subsets
    f = table_fitness(n_slots, 99)
    best, table = exhaustive_search(n_slots, n, f)
    res = optimize(n_slots, n, f, GAConfig(population=40, seed=3, stall_generations=30))
    gap = (res.best_fitness - table[best.slots]) / table[best.slots]
    assert gap <= 0.05
    assert res.evaluations < len(table)


def test_history_monotone_and_deterministic():
    f = table_fitness(25, 5)
    a = optimize(25, 3, f, GAConfig(population=20, seed=11, max_generations=30))
    b = optimize(25, 3, f, GAConfig(population=20, seed=11, max_generations=30))
    assert np.all(np.diff(a.history) <= 0)
    assert a.history == b.history and a.best == b.best
    assert a.stop_reason in ("stall", "max_generations", "exhausted")


def test_checkpoint_resume_identical(tmp_path):
    f = table_fitness(25, 6)
    ga = GAConfig(population=16, seed=4, max_generations=20, stall_generations=100)
    straight = GeneticOptimizer(25, 3, f, ga).run()
    ck = tmp_path / "checkpoint.json"
    first = GeneticOptimizer(25, 3, f, ga).run(checkpoint=ck, max_generations=7)
    assert first.stop_reason == "paused"
    saved = json.loads(ck.read_text())
    assert saved["generation"] == 7 and len(saved["history"]) == 8
    resumed = GeneticOptimizer(25, 3, f, ga).run(checkpoint=ck, resume=True)
    assert resumed.history == straight.history
    assert resumed.best == straight.best and resumed.generations == straight.generations


def test_checkpoint_size_mismatch(tmp_path):
    f = table_fitness(25, 6)
    ck = tmp_path / "checkpoint.json"
    GeneticOptimizer(25, 3, f, GAConfig(population=8)).run(checkpoint=ck, max_generations=1)
    with pytest.raises(ConfigError):
        GeneticOptimizer(24, 3, f, GAConfig(population=8)).run(checkpoint=ck, resume=True)


def test_trivial_and_infeasible():
    f = table_fitness(4, 0)
    res = optimize(4, 4, f, GAConfig(population=5))
    assert res.best.slots == (0, 1, 2, 3) and res.stop_reason == "exhausted"
    with pytest.raises(InfeasibleError):
        optimize(3, 4, f)
    with pytest.raises(InfeasibleError):
        optimize(3, 0, f)


def test_threads_do_not_change_result():
    f = table_fitness(18, 8)
    a = optimize(18, 3, f, GAConfig(population=20, seed=2, max_generations=15), threads=1)
    b = optimize(18, 3, f, GAConfig(population=20, seed=2, max_generations=15), threads=4)
    assert a.history == b.history and a.best == b.best
