"""Sufficient-statistic bookkeeping for a running trial.

Counts of successes/failures per (treatment, stratum) are the sufficient
statistic of the whole design; every downstream quantity (urn proportions,
test statistics, metrics) is a function of them.  Treatments and strata are
0-indexed throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CountsTensor:
    """Success/failure counts, each a (J, H) array of non-negative integers."""

    s: np.ndarray
    f: np.ndarray

    def __post_init__(self) -> None:
        self.s = np.asarray(self.s, dtype=np.int64)
        self.f = np.asarray(self.f, dtype=np.int64)
        if self.s.shape != self.f.shape or self.s.ndim != 2:
            raise ValueError("s and f must be 2-d arrays of identical shape")
        if (self.s < 0).any() or (self.f < 0).any():
            raise ValueError("counts must be non-negative")

    @classmethod
    def zeros(cls, num_treatments: int, num_strata: int) -> "CountsTensor":
        if num_treatments < 1 or num_strata < 1:
            raise ValueError("dimensions must be positive")
        return cls(
            np.zeros((num_treatments, num_strata), dtype=np.int64),
            np.zeros((num_treatments, num_strata), dtype=np.int64),
        )

    @property
    def n(self) -> np.ndarray:
        """Assignments per cell: n[j, h] = s[j, h] + f[j, h]."""
        return self.s + self.f

    @property
    def num_treatments(self) -> int:
        return self.s.shape[0]

    @property
    def num_strata(self) -> int:
        return self.s.shape[1]

    @property
    def total(self) -> int:
        """Total number of recorded outcomes."""
        return int(self.s.sum() + self.f.sum())

    def copy(self) -> "CountsTensor":
        return CountsTensor(self.s.copy(), self.f.copy())

    def check_indices(self, j: int, h: int) -> None:
        if not (0 <= j < self.num_treatments):
            raise IndexError(f"treatment index {j} out of range [0, {self.num_treatments})")
        if not (0 <= h < self.num_strata):
            raise IndexError(f"stratum index {h} out of range [0, {self.num_strata})")


@dataclass
class TrialState:
    """Counts plus the accrual step and the replicate's generator."""

    counts: CountsTensor
    step: int = 0
    rng: np.random.Generator | None = field(default=None, repr=False)

    @classmethod
    def empty(
        cls, num_treatments: int, num_strata: int, rng: np.random.Generator | None = None
    ) -> "TrialState":
        return cls(CountsTensor.zeros(num_treatments, num_strata), 0, rng)


def record_outcome(state: TrialState, h: int, j: int, y: int) -> TrialState:
    """Record one binary outcome for treatment j in stratum h; returns the mutated state."""
    state.counts.check_indices(j, h)
    if y not in (0, 1):
        raise ValueError("outcome must be 0 or 1")
    if y:
        state.counts.s[j, h] += 1
    else:
        state.counts.f[j, h] += 1
    state.step += 1
    return state


def theta_hat(counts: CountsTensor, j: int, h: int) -> float:
    """Observed success rate s/n for one cell; 0 by convention when n = 0."""
    counts.check_indices(j, h)
    n = int(counts.s[j, h] + counts.f[j, h])
    if n == 0:
        return 0.0
    return float(counts.s[j, h]) / n


def theta_hat_outside(counts: CountsTensor, j: int, h: int) -> float:
    """Success rate of treatment j pooled over every stratum except h; 0 when empty."""
    counts.check_indices(j, h)
    s_out = int(counts.s[j].sum() - counts.s[j, h])
    f_out = int(counts.f[j].sum() - counts.f[j, h])
    n_out = s_out + f_out
    if n_out == 0:
        return 0.0
    return s_out / n_out


def theta_hat_matrix(counts: CountsTensor) -> np.ndarray:
    """All per-cell success rates at once, with the zero-count convention."""
    n = counts.n
    out = np.zeros(n.shape, dtype=np.float64)
    np.divide(counts.s, n, out=out, where=n > 0)
    return out
