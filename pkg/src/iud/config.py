"""Trial configuration: dimensions, covariate distribution, design knobs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from iud.allocation import AllocationRule
from iud.mechanisms import MechanismParams

STANDARD_CHECKPOINTS = (50, 100, 200)


def default_checkpoints(horizon: int) -> tuple[int, ...]:
    """The standard checkpoints that fit the horizon, always including the endpoint."""
    pts = sorted({c for c in STANDARD_CHECKPOINTS if c <= horizon} | {horizon})
    return tuple(pts)


@dataclass
class TrialConfig:
    num_treatments: int = 2
    num_strata: int = 5
    horizon: int = 200
    covariate_probs: Sequence[float] | None = None  # uniform when omitted
    varsigma: float = 1.0
    allocation: AllocationRule = field(default_factory=AllocationRule)
    mechanism: MechanismParams = field(default_factory=MechanismParams)
    seed: int = 0
    checkpoints: Sequence[int] | None = None

    def __post_init__(self) -> None:
        if self.num_treatments < 2:
            raise ValueError("need at least two treatments")
        if self.num_strata < 1:
            raise ValueError("need at least one stratum")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not self.varsigma > 0.0:
            raise ValueError("varsigma must be positive")
        if self.covariate_probs is None:
            self.covariate_probs = np.full(self.num_strata, 1.0 / self.num_strata)
        else:
            self.covariate_probs = np.asarray(self.covariate_probs, dtype=np.float64)
        p = self.covariate_probs
        if p.shape != (self.num_strata,):
            raise ValueError("covariate_probs must have one entry per stratum")
        if (p <= 0.0).any():
            raise ValueError("covariate probabilities must be strictly positive")
        if abs(float(p.sum()) - 1.0) > 1e-12:
            raise ValueError("covariate probabilities must sum to 1")
        if self.checkpoints is None:
            self.checkpoints = default_checkpoints(self.horizon)
        else:
            self.checkpoints = tuple(int(c) for c in self.checkpoints)
            if list(self.checkpoints) != sorted(set(self.checkpoints)):
                raise ValueError("checkpoints must be strictly ascending")
            if self.checkpoints and (
                self.checkpoints[0] < 1 or self.checkpoints[-1] > self.horizon
            ):
                raise ValueError("checkpoints must lie in [1, horizon]")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 bits")
        self.seed = int(self.seed)
