"""Observer placement: choose N of the orbital slots minimizing the mean RMSE objective."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CapExceededError, ConfigError, InfeasibleError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConstellationGenome:
    """Sorted tuple of distinct slot indices."""

    slots: tuple

    def __post_init__(self):
        s = tuple(sorted(int(i) for i in self.slots))
        if len(set(s)) != len(s):
            raise ValueError(f"genome has repeated slots: {self.slots}")
        object.__setattr__(self, "slots", s)

    def check(self, n_observers: int, n_slots: int):
        if len(self.slots) != n_observers:
            raise ValueError(f"genome {self.slots} does not have {n_observers} slots")
        if self.slots and (self.slots[0] < 0 or self.slots[-1] >= n_slots):
            raise ValueError(f"genome {self.slots} indexes outside [0, {n_slots})")

    def as_binary(self, n_slots: int) -> np.ndarray:
        X = np.zeros(n_slots, dtype=np.int8)
        X[list(self.slots)] = 1
        return X

    def __len__(self):
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)


@dataclass(frozen=True)
class GAConfig:
    population: int = 50
    crossover_fraction: float = 0.8
    max_generations: int | None = None  # None means 100 * number of slots
    stall_generations: int = 50
    stall_tolerance: float = 1e-6
    mutation_rate: float = 0.1
    elite_count: int | None = None  # None means ceil(0.05 * population)
    selection_pressure: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("GA population must be at least 2")
        if not 0.0 <= self.crossover_fraction <= 1.0:
            raise ConfigError("crossover_fraction must lie in [0, 1]")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError("mutation_rate must lie in [0, 1]")
        if self.stall_generations < 1:
            raise ConfigError("stall_generations must be >= 1")
        if self.max_generations is not None and self.max_generations < 1:
            raise ConfigError("max_generations must be >= 1")
        if not 1.0 <= self.selection_pressure <= 2.0:
            raise ConfigError("selection_pressure must lie in [1, 2]")
        if self.elite_count is not None and not 0 <= self.elite_count < self.population:
            raise ConfigError("elite_count must lie in [0, population)")

    def generations_for(self, n_slots: int) -> int:
        return self.max_generations if self.max_generations is not None else 100 * n_slots

    @property
    def elites(self) -> int:
        if self.elite_count is not None:
            return self.elite_count
        return math.ceil(0.05 * self.population)


def repair(candidate, n_observers: int, n_slots: int, rng, pool=()) -> ConstellationGenome:
    """Force an index collection to exactly ``n_observers`` distinct slots.

    Extra slots are dropped uniformly at random. Missing slots are drawn
    first from ``pool`` (e.g. the parents' symmetric difference), then from
    every unused slot.
    """
    if n_observers > n_slots:
        raise InfeasibleError(f"cannot choose {n_observers} of {n_slots} slots")
    chosen = sorted({int(i) for i in candidate if 0 <= int(i) < n_slots})
    if len(chosen) > n_observers:
        keep = rng.choice(len(chosen), size=n_observers, replace=False)
        chosen = sorted(chosen[i] for i in keep)
    elif len(chosen) < n_observers:
        have = set(chosen)
        extra = sorted({int(i) for i in pool} - have)
        need = n_observers - len(chosen)
        if extra:
            take = rng.choice(len(extra), size=min(need, len(extra)), replace=False)
            chosen += [extra[i] for i in take]
            need = n_observers - len(chosen)
        if need:
            unused = sorted(set(range(n_slots)) - set(chosen))
            take = rng.choice(len(unused), size=need, replace=False)
            chosen += [unused[i] for i in take]
    return ConstellationGenome(tuple(chosen))


class FitnessCache:
    """Memoized fitness keyed by the canonical slot tuple.

    Values depend only on the key (seeds are fixed per run), so two threads
    racing on the same key compute the same number and either insert wins.
    """

    def __init__(self, fitness: Callable[[ConstellationGenome], float], enabled: bool = True):
        self.fitness = fitness
        self.enabled = enabled
        self.table: dict[tuple, float] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def __call__(self, genome: ConstellationGenome) -> float:
        key = genome.slots
        if self.enabled:
            with self._lock:
                if key in self.table:
                    self.hits += 1
                    return self.table[key]
                self.misses += 1
        else:
            with self._lock:
                self.misses += 1
        value = float(self.fitness(genome))
        if self.enabled:
            with self._lock:
                self.table.setdefault(key, value)
        return value

    def __contains__(self, genome) -> bool:
        return genome.slots in self.table

    @property
    def evaluations(self) -> int:
        return self.misses


def exhaustive_search(n_slots: int, n_observers: int, fitness, cap: int = 100_000):
    """Evaluate every ``n_observers``-subset; returns ``(best genome, {slots: fitness})``."""
    if hasattr(n_slots, "__len__"):
        n_slots = len(n_slots)
    if n_observers > n_slots or n_observers < 1:
        raise InfeasibleError(f"cannot choose {n_observers} of {n_slots} slots")
    total = math.comb(n_slots, n_observers)
    if total > cap:
        raise CapExceededError(f"C({n_slots}, {n_observers}) = {total} exceeds the cap of {cap}")
    table = {}
    for combo in itertools.combinations(range(n_slots), n_observers):
        table[combo] = float(fitness(ConstellationGenome(combo)))
    best = min(table, key=lambda k: (table[k], k))
    return ConstellationGenome(best), table


@dataclass
class OptimizationResult:
    best: ConstellationGenome
    best_fitness: float
    history: list
    generations: int
    evaluations: int
    cache_hits: int
    stop_reason: str
    table: dict = field(default_factory=dict, repr=False)


# --------------------------------------------------------------------------
# genetic algorithm
# --------------------------------------------------------------------------

def _rank_weights(n: int, pressure: float) -> np.ndarray:
    # linear ranking, best first
    if n == 1:
        return np.ones(1)
    r = np.arange(n)
    return (pressure - 2.0 * (pressure - 1.0) * r / (n - 1)) / n


def stochastic_uniform(weights: np.ndarray, count: int, rng) -> np.ndarray:
    """Indices picked by equally spaced pointers over the cumulative weights."""
    cum = np.cumsum(weights / weights.sum())
    cum[-1] = 1.0
    step = 1.0 / count
    pointers = rng.uniform(0.0, step) + step * np.arange(count)
    return np.searchsorted(cum, pointers, side="right").clip(0, len(weights) - 1)


def crossover(a: ConstellationGenome, b: ConstellationGenome, n_slots: int, rng) -> ConstellationGenome:
    common = set(a.slots) & set(b.slots)
    diff = sorted(set(a.slots) ^ set(b.slots))
    picked = [i for i in diff if rng.random() < 0.5]
    return repair(sorted(common) + picked, len(a), n_slots, rng, pool=diff)


def mutate(g: ConstellationGenome, n_slots: int, rng) -> ConstellationGenome:
    unused = sorted(set(range(n_slots)) - set(g.slots))
    if not unused:
        return g
    slots = list(g.slots)
    slots[int(rng.integers(len(slots)))] = unused[int(rng.integers(len(unused)))]
    return ConstellationGenome(tuple(slots))


def _population_digest(pop) -> str:
    h = hashlib.sha256()
    for g in pop:
        h.update((",".join(map(str, g.slots)) + ";").encode())
    return h.hexdigest()


class GeneticOptimizer:
    """Subset-encoded GA with elitism, linear ranking and stochastic-uniform selection."""

    def __init__(self, n_slots: int, n_observers: int, fitness, ga: GAConfig = GAConfig(),
                 threads: int = 1, slot_labels: Sequence | None = None, cache: bool = True):
        if n_observers < 1:
            raise InfeasibleError("at least one observer is required")
        if n_slots < n_observers:
            raise InfeasibleError(f"only {n_slots} slots for {n_observers} observers")
        self.n_slots = n_slots
        self.n = n_observers
        self.ga = ga
        self.cache = fitness if isinstance(fitness, FitnessCache) else FitnessCache(fitness, cache)
        self.threads = max(1, int(threads))
        self.slot_labels = slot_labels
        self.total = math.comb(n_slots, n_observers)

    def _evaluate(self, pop) -> np.ndarray:
        todo = []
        for g in pop:
            if g not in self.cache and g.slots not in {t.slots for t in todo}:
                todo.append(g)
        if self.threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as ex:
                list(ex.map(self.cache, todo))
        return np.array([self.cache(g) for g in pop])

    def _initial_population(self, rng):
        pop = []
        seen = set()
        target = min(self.ga.population, self.total)
        while len(pop) < target:
            g = repair([], self.n, self.n_slots, rng)
            if g.slots in seen:
                continue
            seen.add(g.slots)
            pop.append(g)
        while len(pop) < self.ga.population:
            pop.append(pop[int(rng.integers(len(pop)))])
        return pop

    def _next_generation(self, pop, fit, rng):
        ga = self.ga
        order = np.lexsort((np.arange(len(pop)), fit))
        ranked = [pop[i] for i in order]
        n_elite = min(ga.elites, len(ranked))
        n_kids = ga.population - n_elite
        n_cross = int(round(ga.crossover_fraction * n_kids))
        n_mut = n_kids - n_cross
        weights = _rank_weights(len(ranked), ga.selection_pressure)
        parents = stochastic_uniform(weights, 2 * n_cross + n_mut, rng)
        rng.shuffle(parents)
        kids = ranked[:n_elite]
        for i in range(n_cross):
            child = crossover(ranked[parents[2 * i]], ranked[parents[2 * i + 1]], self.n_slots, rng)
            if rng.random() < ga.mutation_rate:
                child = mutate(child, self.n_slots, rng)
            kids.append(child)
        for i in range(n_mut):
            kids.append(mutate(ranked[parents[2 * n_cross + i]], self.n_slots, rng))
        return kids

    def _label(self, g):
        if self.slot_labels is None:
            return list(g.slots)
        return [self.slot_labels[i] for i in g.slots]

    def _checkpoint(self, path, gen, pop, best, best_fit, history, stall, rng):
        state = {
            "version": CHECKPOINT_VERSION,
            "generation": gen,
            "best_genome": list(best.slots),
            "best_slots": self._label(best),
            "best_fitness": best_fit,
            "history": history,
            "stall": stall,
            "population": [list(g.slots) for g in pop],
            "population_digest": _population_digest(pop),
            "rng_state": rng.bit_generator.state,
            "n_slots": self.n_slots,
            "n_observers": self.n,
            "cache": [[list(k), v] for k, v in sorted(self.cache.table.items())],
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(state, indent=1, sort_keys=True))
        os.replace(tmp, path)

    def run(self, checkpoint: str | os.PathLike | None = None, resume: bool = False,
            max_generations: int | None = None) -> OptimizationResult:
        """Run to completion (or for ``max_generations`` more generations, for testing resumption)."""
        ga = self.ga
        rng = np.random.default_rng(ga.seed)
        limit = ga.generations_for(self.n_slots)
        if resume and checkpoint is not None and Path(checkpoint).exists():
            st = json.loads(Path(checkpoint).read_text())
            if st.get("n_slots") != self.n_slots or st.get("n_observers") != self.n:
                raise ConfigError("checkpoint was written for a different problem size")
            pop = [ConstellationGenome(tuple(s)) for s in st["population"]]
            if _population_digest(pop) != st["population_digest"]:
                raise ConfigError("checkpoint population digest mismatch")
            rng.bit_generator.state = st["rng_state"]
            for k, v in st["cache"]:
                self.cache.table[tuple(k)] = v
            gen = st["generation"]
            best = ConstellationGenome(tuple(st["best_genome"]))
            best_fit = st["best_fitness"]
            history = list(st["history"])
            stall = st["stall"]
            fit = self._evaluate(pop)
        else:
            pop = self._initial_population(rng)
            fit = self._evaluate(pop)
            i = int(np.lexsort((np.arange(len(pop)), fit))[0])
            best, best_fit = pop[i], float(fit[i])
            history = [best_fit]
            gen = 0
            stall = 0
            if checkpoint is not None:
                self._checkpoint(checkpoint, gen, pop, best, best_fit, history, stall, rng)
        reason = "max_generations"
        steps = 0
        while True:
            if self.total == 1 or len(self.cache.table) >= self.total:
                reason = "exhausted"
                break
            if gen >= limit:
                reason = "max_generations"
                break
            if stall >= ga.stall_generations:
                reason = "stall"
                break
            if max_generations is not None and steps >= max_generations:
                reason = "paused"
                break
            pop = self._next_generation(pop, fit, rng)
            fit = self._evaluate(pop)
            gen += 1
            steps += 1
            i = int(np.lexsort((np.arange(len(pop)), fit))[0])
            if fit[i] < best_fit - ga.stall_tolerance:
                stall = 0
            else:
                stall += 1
            if fit[i] < best_fit:
                best, best_fit = pop[i], float(fit[i])
            history.append(best_fit)
            if checkpoint is not None:
                self._checkpoint(checkpoint, gen, pop, best, best_fit, history, stall, rng)
        if self.cache.enabled and self.cache.table:
            # exhaustive coverage may have found something better than the last population
            k = min(self.cache.table, key=lambda s: (self.cache.table[s], s))
            if self.cache.table[k] < best_fit:
                best, best_fit = ConstellationGenome(k), self.cache.table[k]
                history[-1] = best_fit
        log.info("GA stopped after %d generation(s): %s; best %.6g", gen, reason, best_fit)
        return OptimizationResult(best, best_fit, history, gen, self.cache.evaluations,
                                  self.cache.hits, reason, dict(self.cache.table))


def optimize(slots, n_observers: int, fitness, ga: GAConfig = GAConfig(), threads: int = 1,
             checkpoint=None, resume: bool = False) -> OptimizationResult:
    """Minimize ``fitness(genome)`` over ``n_observers``-subsets of ``slots``.

    ``slots`` may be a list of slot objects or just their count.
    """
    n_slots = slots if isinstance(slots, int) else len(slots)
    labels = None
    if not isinstance(slots, int):
        labels = [getattr(s, "key", str(i)) for i, s in enumerate(slots)]
    opt = GeneticOptimizer(n_slots, n_observers, fitness, ga, threads, labels)
    return opt.run(checkpoint, resume)


def scenario_fitness(scenario, slots) -> Callable[[ConstellationGenome], float]:
    """Fitness adapter: a genome's slots scored by ``scenario.objective``."""
    def f(genome: ConstellationGenome) -> float:
        return scenario.objective([slots[i] for i in genome.slots])
    return f


__all__ = ["ConstellationGenome", "GAConfig", "FitnessCache", "GeneticOptimizer", "OptimizationResult",
           "crossover", "exhaustive_search", "mutate", "optimize", "repair", "scenario_fitness",
           "stochastic_uniform"]
