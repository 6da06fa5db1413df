"""Fixed-sample and sequential statistics computed from counts.

Per-stratum comparisons use the usual two-proportion Wald statistic with
plug-in binomial variances; the homogeneity test is the quadratic form of the
contrasts against the first treatment.  Interim monitoring evaluates the same
Wald statistic on checkpoint snapshots: at information times t_i <= t_j the
statistics are asymptotically jointly normal with covariance
sqrt(floor(n*t_i) / floor(n*t_j)), so standard group-sequential boundaries
apply directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from iud.allocation import AllocationRule, f_eval
from iud.errors import (
    ConfigurationError,
    InsufficientDataError,
    SingularStatisticError,
    UndefinedStatisticError,
)
from iud.trial import CountsTensor, theta_hat


@dataclass(frozen=True)
class SequentialPath:
    """Wald statistics of one (treatment pair, stratum) along information times."""

    times: tuple[float, ...]
    statistics: tuple[float, ...]
    stratum: int
    pair: tuple[int, int]


def normal_quantile(p: float) -> float:
    """Standard-normal quantile."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return float(ndtri(p))


def limit_proportions(theta_col: Sequence[float], rule: AllocationRule) -> np.ndarray:
    """Limiting allocation proportions f(theta_j) / sum_l f(theta_l) of one stratum."""
    weights = np.array([f_eval(rule, float(x)) for x in theta_col], dtype=np.float64)
    return weights / weights.sum()


def wald_from_rates(rate_j: float, n_j: float, rate_l: float, n_l: float) -> float:
    """Two-sample Wald statistic from point estimates and their sample sizes.

    Accepts any consistent estimate/scaling pair, e.g. urn proportions with the
    similarity mechanism's augmented sample sizes for reporting.
    """
    if n_j < 1 or n_l < 1:
        raise InsufficientDataError("both cells need at least one observation")
    var = rate_j * (1.0 - rate_j) / n_j + rate_l * (1.0 - rate_l) / n_l
    if var <= 0.0:
        raise UndefinedStatisticError("estimated variance is zero in both arms")
    return (rate_j - rate_l) / math.sqrt(var)


def wald_statistic(counts: CountsTensor, j: int, l: int, h: int) -> float:
    """Wald statistic for treatment j versus l in stratum h."""
    return wald_from_rates(
        theta_hat(counts, j, h),
        float(counts.n[j, h]),
        theta_hat(counts, l, h),
        float(counts.n[l, h]),
    )


def confidence_interval(
    counts: CountsTensor, j: int, l: int, h: int, level: float = 0.95
) -> tuple[float, float]:
    """Asymptotic interval for the success-rate difference in stratum h."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    n_j = float(counts.n[j, h])
    n_l = float(counts.n[l, h])
    if n_j < 1 or n_l < 1:
        raise InsufficientDataError("both cells need at least one observation")
    t_j = theta_hat(counts, j, h)
    t_l = theta_hat(counts, l, h)
    half = normal_quantile(1.0 - (1.0 - level) / 2.0) * math.sqrt(
        t_j * (1.0 - t_j) / n_j + t_l * (1.0 - t_l) / n_l
    )
    center = t_j - t_l
    return center - half, center + half


def homogeneity_chi2(counts: CountsTensor, h: int) -> float:
    """Quadratic-form statistic for equality of all treatment effects in stratum h.

    Asymptotically chi-squared with J - 1 degrees of freedom under homogeneity;
    for J = 2 it equals the squared Wald statistic.
    """
    counts.check_indices(0, h)
    num_t = counts.num_treatments
    n_col = counts.n[:, h].astype(np.float64)
    if (n_col < 1).any():
        raise InsufficientDataError("every arm needs at least one observation")
    rates = np.array([theta_hat(counts, j, h) for j in range(num_t)])
    d = rates * (1.0 - rates) / n_col
    a_t = np.hstack([np.ones((num_t - 1, 1)), -np.eye(num_t - 1)])
    contrasts = a_t @ rates
    inner = a_t @ np.diag(d) @ a_t.T
    try:
        solved = np.linalg.solve(inner, contrasts)
    except np.linalg.LinAlgError as exc:
        raise SingularStatisticError("inner covariance matrix is singular") from exc
    if not np.isfinite(solved).all():
        raise SingularStatisticError("inner covariance matrix is singular")
    return float(contrasts @ solved)


def canonical_covariance(t_i: float, t_j: float, n: int) -> float:
    """sqrt(floor(n*t_i) / floor(n*t_j)), the interim-statistic covariance."""
    if not (0.0 < t_i <= t_j <= 1.0):
        raise ValueError("need 0 < t_i <= t_j <= 1")
    return math.sqrt(math.floor(n * t_i) / math.floor(n * t_j))


def sequential_path(trace, j: int, l: int, h: int, times: Sequence[float]) -> SequentialPath:
    """Wald statistics on the snapshots at floor(n * t) for each information time."""
    times = tuple(float(t) for t in times)
    if not times or any(not 0.0 < t <= 1.0 for t in times):
        raise ValueError("information times must lie in (0, 1]")
    if list(times) != sorted(times):
        raise ValueError("information times must be ascending")
    horizon = trace.horizon
    available = {step: idx for idx, step in enumerate(trace.checkpoints)}
    stats = []
    for t in times:
        step = math.floor(horizon * t)
        if step not in available:
            raise ConfigurationError(
                f"trace has no snapshot at step {step} (t={t}); checkpoints: {trace.checkpoints}"
            )
        stats.append(wald_statistic(trace.counts_at(available[step]), j, l, h))
    return SequentialPath(times, tuple(stats), h, (j, l))


def drift(
    theta: np.ndarray,
    p: Sequence[float],
    rule: AllocationRule,
    j: int,
    l: int,
    h: int,
) -> float:
    """Per-unit drift of the sequential Wald statistic under the alternative.

    mu = (theta_j - theta_l) / sqrt(v_j + v_l) with v = theta*(1-theta)/(p_h*pi),
    pi the limiting allocation proportions; the statistic at information time t
    has mean approximately sqrt(n*t) * mu.
    """
    theta = np.asarray(theta, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    pi = limit_proportions(theta[:, h], rule)
    v_j = theta[j, h] * (1.0 - theta[j, h]) / (p[h] * pi[j])
    v_l = theta[l, h] * (1.0 - theta[l, h]) / (p[h] * pi[l])
    return float((theta[j, h] - theta[l, h]) / math.sqrt(v_j + v_l))
