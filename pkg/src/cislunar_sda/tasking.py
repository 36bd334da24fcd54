"""Sensor tasking procedures: which observers measure at which epoch."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Procedure(str, enum.Enum):
    BASELINE = "baseline"
    STP_A = "stp-a"
    STP_B = "stp-b"
    STP_C = "stp-c"

    @classmethod
    def parse(cls, token) -> "Procedure":
        if isinstance(token, Procedure):
            return token
        try:
            return cls(str(token).strip().lower())
        except ValueError:
            raise ValueError(f"unknown tasking procedure {token!r}; "
                             f"expected one of {[p.value for p in cls]}") from None


@dataclass(frozen=True)
class TaskingSchedule:
    procedure: Procedure
    n_observers: int
    individual_cadence: float
    system_cadence: float
    groups: tuple = ()

    def assignment(self, k: int) -> frozenset:
        """Observer indices tasked at epoch ``k`` (k >= 1)."""
        if k < 1:
            return frozenset()
        if self.procedure in (Procedure.BASELINE, Procedure.STP_A):
            return frozenset(range(self.n_observers))
        if self.procedure is Procedure.STP_B:
            return frozenset({(k - 1) % self.n_observers})
        return frozenset(self.groups[0] if k % 2 == 1 else self.groups[1])

    def n_epochs(self, horizon: float) -> int:
        # guard against 8 / 0.02 = 399.99999...
        return int(math.floor(horizon / self.system_cadence + 1e-9))

    def mask(self, horizon: float) -> np.ndarray:
        """Boolean (n+1, n_observers) tasking table; row 0 is the initialization epoch."""
        n = self.n_epochs(horizon)
        m = np.zeros((n + 1, self.n_observers), dtype=bool)
        for k in range(1, n + 1):
            m[k, list(self.assignment(k))] = True
        return m


def build_schedule(procedure, n_observers: int, individual_cadence: float = 0.02,
                   horizon: float | None = None, groups=None) -> TaskingSchedule:
    """Schedule for one of the baseline / STP-A / STP-B / STP-C procedures.

    STP-C splits the observers into the first ``ceil(N/2)`` indices and the
    rest unless explicit ``groups`` are given.
    """
    proc = Procedure.parse(procedure)
    if n_observers < 1:
        raise ValueError("n_observers must be >= 1")
    if not individual_cadence > 0:
        raise ValueError("individual_cadence must be positive")
    if horizon is not None and not horizon > 0:
        raise ValueError("horizon must be positive")
    grp = ()
    if proc is Procedure.BASELINE:
        if n_observers != 1:
            raise ValueError("the baseline procedure uses exactly one observer")
        dt = individual_cadence
    elif proc is Procedure.STP_A:
        dt = individual_cadence
    elif proc is Procedure.STP_B:
        dt = individual_cadence / n_observers
    else:
        if n_observers < 2:
            raise ValueError("STP-C needs at least two observers")
        dt = individual_cadence / 2
        if groups is None:
            half = math.ceil(n_observers / 2)
            grp = (tuple(range(half)), tuple(range(half, n_observers)))
        else:
            grp = tuple(tuple(sorted(int(i) for i in g)) for g in groups)
            flat = sorted(i for g in grp for i in g)
            if len(grp) != 2 or flat != list(range(n_observers)) or not all(grp):
                raise ValueError("STP-C groups must be two non-empty sets partitioning the observers")
    return TaskingSchedule(proc, n_observers, individual_cadence, dt, grp)


def epochs(schedule: TaskingSchedule, horizon: float) -> np.ndarray:
    """Measurement epochs ``k * system_cadence`` for ``k = 1..n``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    n = schedule.n_epochs(horizon)
    return np.arange(1, n + 1) * schedule.system_cadence
