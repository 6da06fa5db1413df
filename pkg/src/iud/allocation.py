"""Randomized allocation: covariate draw, urn-driven assignment, outcome draw.

An incoming patient of stratum h receives treatment j with probability
f(P[j,h]) / sum_l f(P[l,h]) where f is continuous, increasing and positive at
zero.  The working choice f(x) = 1/(1-x) is capped near x = 1 rather than
allowed to overflow; a constant f gives complete randomization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numba import njit

F_CONSTANT = 0
F_INVERSE_COMPLEMENT = 1
F_POWER = 2


class AllocationKind(Enum):
    CONSTANT = "constant"
    INVERSE_COMPLEMENT = "inverse_complement"
    POWER = "power"

    @property
    def code(self) -> int:
        return {
            AllocationKind.CONSTANT: F_CONSTANT,
            AllocationKind.INVERSE_COMPLEMENT: F_INVERSE_COMPLEMENT,
            AllocationKind.POWER: F_POWER,
        }[self]

    @classmethod
    def parse(cls, name: str) -> "AllocationKind":
        key = name.strip().lower()
        aliases = {"cr": cls.CONSTANT, "inv": cls.INVERSE_COMPLEMENT}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown allocation function {name!r}") from None


@dataclass(frozen=True)
class AllocationRule:
    """f together with its guards: the cap for 1/(1-x) at x = 1, the epsilon
    keeping x^gamma positive at x = 0."""

    kind: AllocationKind = AllocationKind.INVERSE_COMPLEMENT
    gamma: float = 1.0
    epsilon: float = 1e-2
    cap: float = 1e6

    def __post_init__(self) -> None:
        if self.kind is AllocationKind.POWER and not (self.gamma > 0.0 and self.epsilon > 0.0):
            raise ValueError("power rule needs gamma > 0 and epsilon > 0")
        if not self.cap > 1.0:
            raise ValueError("cap must exceed 1")


def f_eval(rule: AllocationRule, x: float) -> float:
    """Allocation weight f(x); strictly positive for every x in [0, 1]."""
    if not (0.0 <= x <= 1.0):
        raise ValueError("x must lie in [0, 1]")
    return float(_f_eval(rule.kind.code, float(x), rule.gamma, rule.epsilon, rule.cap))


def allocation_probs(p_row: Sequence[float], rule: AllocationRule) -> np.ndarray:
    """Normalized f-weights over the treatments of one stratum."""
    weights = np.array([f_eval(rule, float(x)) for x in p_row], dtype=np.float64)
    return weights / weights.sum()


def draw_covariate(p: Sequence[float], rng: np.random.Generator) -> int:
    """Stratum index with probabilities p."""
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a probability vector")
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))


def draw_assignment(probs: Sequence[float], rng: np.random.Generator) -> int:
    """Treatment index from a probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))


def draw_outcome(theta: float, rng: np.random.Generator) -> int:
    """Bernoulli(theta) response."""
    if not (0.0 <= theta <= 1.0):
        raise ValueError("theta must lie in [0, 1]")
    return int(rng.random() < theta)


@njit(cache=True)
def _f_eval(kind: int, x: float, gamma: float, epsilon: float, cap: float) -> float:
    if kind == F_CONSTANT:
        return 1.0
    if kind == F_INVERSE_COMPLEMENT:
        if x >= 1.0:
            return cap
        return min(1.0 / (1.0 - x), cap)
    return x**gamma + epsilon
