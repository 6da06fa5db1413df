"""Beta-Binomial marginal likelihood: evaluation, maximization, degeneracy handling.

For one treatment the per-stratum counts (n_h, s_h) enter the profile
log-likelihood

    ell(alpha, beta) = sum_h [ln B(alpha + s_h, beta + n_h - s_h) - ln B(alpha, beta)],

the binomial coefficients being parameter-free.  The maximizer is searched in
the reparametrization (mu, M) = (alpha/(alpha+beta), alpha+beta): for fixed M
the function is strictly concave in mu (Newton with a bisection safeguard is
globally convergent), and the only degenerate direction is M -> infinity, along
which ell tends to

    n_tot * [mu_bar*ln(mu_bar) + (1-mu_bar)*ln(1-mu_bar)] - n_tot * KL(mu_bar, mu),

with mu_bar = s_tot/n_tot; the supremum over the whole boundary is therefore
the (negative) entropy term, attained in the limit mu -> mu_bar.  A candidate
whose profile maximum either sits at the M cap or fails to reach that boundary
supremum is reported as a pooled boundary fit: the prior collapses to a point
mass at the pooled rate.  Degenerate samples (all successes or all failures)
fall back to a varsigma-smoothed pooled prior and are flagged as such.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numba import njit

from iud._special import betaln, binary_entropy, digamma, trigamma
from iud.errors import DegenerateSampleError

STATUS_INTERIOR = 0
STATUS_POOLED = 1
STATUS_DEFAULT = 2

_M_LO = 1e-4            # lower end of the cold scan over M = alpha + beta
_SCAN_PER_DECADE = 8    # cold-scan density in log10(M)
_INVPHI = 0.6180339887498949


class MleStatus(Enum):
    INTERIOR = "interior"
    POOLED_BOUNDARY = "pooled_boundary"
    DEFAULT_PRIOR = "default_prior"


@dataclass(frozen=True)
class AggregatedSample:
    """Per-stratum trial and success counts for one treatment."""

    n: np.ndarray
    s: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "n", np.asarray(self.n, dtype=np.int64))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.int64))
        if self.n.ndim != 1 or self.n.shape != self.s.shape:
            raise ValueError("n and s must be 1-d arrays of equal length")
        if (self.n < 0).any() or (self.s < 0).any() or (self.s > self.n).any():
            raise ValueError("need 0 <= s_h <= n_h for every stratum")

    @property
    def n_total(self) -> int:
        return int(self.n.sum())

    @property
    def s_total(self) -> int:
        return int(self.s.sum())

    @classmethod
    def from_counts(cls, counts, j: int) -> "AggregatedSample":
        """Rows of one treatment from a (J, H) counts tensor."""
        counts.check_indices(j, 0)
        return cls(counts.s[j] + counts.f[j], counts.s[j])


@dataclass(frozen=True)
class MleOptions:
    """Solver knobs; varsigma is the smoothing constant for degenerate samples."""

    m_max: float = 1e6
    tol: float = 1e-8
    max_iters: int = 200
    varsigma: float = 1.0

    def __post_init__(self) -> None:
        if not (self.m_max > 1.0 and self.tol > 0.0 and self.varsigma > 0.0):
            raise ValueError("need m_max > 1, tol > 0, varsigma > 0")


@dataclass(frozen=True)
class MleResult:
    """Fitted prior parameters; alpha and beta are +inf for a pooled-boundary fit."""

    alpha: float
    beta: float
    status: MleStatus
    log_likelihood: float
    mean: float  # alpha/(alpha+beta), finite even in the pooled case


def betabin_log_pmf(n: int, alpha: float, beta: float, s: int) -> float:
    """Log pmf of the Beta-Binomial, via log-gamma differences."""
    if not (0 <= s <= n):
        raise ValueError("need 0 <= s <= n")
    if alpha <= 0.0 or beta <= 0.0:
        raise ValueError("alpha and beta must be positive")
    log_comb = math.lgamma(n + 1) - math.lgamma(s + 1) - math.lgamma(n - s + 1)
    return log_comb + betaln(alpha + s, beta + n - s) - betaln(alpha, beta)


def profile_log_likelihood(sample: AggregatedSample, alpha: float, beta: float) -> float:
    """ell(alpha, beta) over the non-empty strata (the combinatorial term dropped)."""
    if alpha <= 0.0 or beta <= 0.0:
        raise ValueError("alpha and beta must be positive")
    return float(_ell(sample.n, sample.s, alpha, beta))


def variance_condition(sample: AggregatedSample) -> bool:
    """Sufficient condition for a finite interior maximum.

    True when the between-strata variability of the observed rates, weighted by
    n_h^2, exceeds the pooled binomial variance n_tot * p * (1 - p); false is
    inconclusive.
    """
    n_tot = sample.n_total
    if n_tot == 0:
        return False
    p = sample.s_total / n_tot
    lhs = 0.0
    for n_h, s_h in zip(sample.n.tolist(), sample.s.tolist()):
        if n_h > 0:
            lhs += n_h * n_h * (s_h / n_h - p) ** 2
    return lhs > n_tot * p * (1.0 - p)


def boundary_supremum(sample: AggregatedSample) -> float:
    """Supremum of ell along alpha + beta -> infinity: n_tot * H(s_tot/n_tot) <= 0.

    H(z) = z ln z + (1-z) ln(1-z).  Undefined for all-success / all-failure
    samples, where ell is unbounded along mu -> 0 or 1.
    """
    n_tot, s_tot = sample.n_total, sample.s_total
    if s_tot < 1 or s_tot > n_tot - 1:
        raise DegenerateSampleError("need 1 <= s_total <= n_total - 1")
    return n_tot * binary_entropy(s_tot / n_tot)


def fit_mle(sample: AggregatedSample, opts: MleOptions | None = None) -> MleResult:
    """Maximize the profile log-likelihood, classifying the degenerate regimes.

    Empty or all-success/all-failure samples yield DEFAULT_PRIOR with
    varsigma-smoothed parameters.  Otherwise the (mu, M) search runs a coarse
    log-spaced scan over M refined by golden section, Newton over mu inside;
    a maximizer at the M cap, or one that stays below the boundary supremum,
    is reported as POOLED_BOUNDARY with mean s_tot/n_tot.
    """
    opts = opts or MleOptions()
    alpha, beta, ell, status, _, _ = _fit_core(
        sample.n, sample.s, opts.m_max, opts.tol, opts.varsigma,
        0.5, 10.0, False, opts.max_iters,
    )
    if status == STATUS_POOLED:
        mean = sample.s_total / sample.n_total
        return MleResult(math.inf, math.inf, MleStatus.POOLED_BOUNDARY, ell, mean)
    st = MleStatus.INTERIOR if status == STATUS_INTERIOR else MleStatus.DEFAULT_PRIOR
    return MleResult(alpha, beta, st, ell, alpha / (alpha + beta))


def cluster_strata(theta_hats: Sequence[float], c: float) -> list[list[int]]:
    """Partition stratum ids into maximal runs of sorted rates with gaps <= c.

    Sorting is stable (ties broken by stratum id); each block is returned with
    ascending ids, blocks ordered by increasing rate.
    """
    if not (c > 0.0):
        raise ValueError("c must be positive")
    vals = [float(v) for v in theta_hats]
    order = sorted(range(len(vals)), key=lambda i: (vals[i], i))
    blocks: list[list[int]] = []
    for pos, idx in enumerate(order):
        if pos == 0 or vals[idx] - vals[order[pos - 1]] > c:
            blocks.append([])
        blocks[-1].append(idx)
    for block in blocks:
        block.sort()
    return blocks


def fit_mle_clustered(
    sample: AggregatedSample,
    partition: Sequence[Sequence[int]],
    opts: MleOptions | None = None,
) -> MleResult:
    """fit_mle on the block-aggregated sample induced by a stratum partition."""
    size = sample.n.shape[0]
    seen = sorted(i for block in partition for i in block)
    if seen != list(range(size)):
        raise ValueError("partition must cover every stratum exactly once")
    n_b = np.array([int(sample.n[list(block)].sum()) for block in partition], dtype=np.int64)
    s_b = np.array([int(sample.s[list(block)].sum()) for block in partition], dtype=np.int64)
    return fit_mle(AggregatedSample(n_b, s_b), opts)


# --- numba kernels ---------------------------------------------------------
#
# The same routines back both the public API above and the per-step refits in
# the simulation engine, where a warm start from the previous optimum replaces
# the cold scan.


@njit(cache=True)
def _ell(nh, sh, alpha, beta):
    acc = 0.0
    lb = betaln(alpha, beta)
    for h in range(nh.shape[0]):
        n = nh[h]
        if n > 0:
            s = sh[h]
            acc += betaln(alpha + s, beta + (n - s)) - lb
    return acc


@njit(cache=True)
def _mu_profile(nh, sh, big_m, mu0, max_iters):
    """argmax over mu in (0,1) of ell(mu*M, (1-mu)*M); d ell/d mu is strictly decreasing."""
    lo = 1e-13
    hi = 1.0 - 1e-13
    mu = mu0 if lo < mu0 < hi else 0.5
    for _ in range(max_iters):
        a = mu * big_m
        b = (1.0 - mu) * big_m
        g = 0.0
        gp = 0.0
        for h in range(nh.shape[0]):
            n = nh[h]
            if n > 0:
                s = sh[h]
                f = n - s
                g += (digamma(a + s) - digamma(a)) - (digamma(b + f) - digamma(b))
                gp += (trigamma(a + s) - trigamma(a)) + (trigamma(b + f) - trigamma(b))
        if g > 0.0:
            lo = mu
        else:
            hi = mu
        if hi - lo < 1e-14:
            break
        step = g / (big_m * gp)  # gp < 0: Newton ascends
        nxt = mu - step
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - mu) < 1e-15:
            mu = nxt
            break
        mu = nxt
    return mu


@njit(cache=True)
def _profile_value(nh, sh, big_m, mu0, max_iters):
    mu = _mu_profile(nh, sh, big_m, mu0, max_iters)
    return mu, _ell(nh, sh, mu * big_m, (1.0 - mu) * big_m)


@njit(cache=True)
def _fit_cold(nh, sh, m_max, max_iters):
    """Global (mu, M) search: log-spaced scan over M, golden-section refinement."""
    ln_lo = math.log(_M_LO)
    ln_hi = math.log(m_max)
    npts = int((ln_hi - ln_lo) / math.log(10.0) * _SCAN_PER_DECADE) + 2
    step = (ln_hi - ln_lo) / (npts - 1)

    best_ell = -1e300
    best_mu = 0.5
    best_m = _M_LO
    best_i = 0
    mu = 0.5
    for i in range(npts):
        big_m = math.exp(ln_lo + step * i)
        mu, ell = _profile_value(nh, sh, big_m, mu, max_iters)
        if ell > best_ell:
            best_ell, best_mu, best_m, best_i = ell, mu, big_m, i

    lo = ln_lo + step * max(best_i - 1, 0)
    hi = ln_lo + step * min(best_i + 1, npts - 1)
    x1 = hi - _INVPHI * (hi - lo)
    x2 = lo + _INVPHI * (hi - lo)
    mu1, f1 = _profile_value(nh, sh, math.exp(x1), best_mu, max_iters)
    mu2, f2 = _profile_value(nh, sh, math.exp(x2), best_mu, max_iters)
    for _ in range(120):
        if hi - lo < 1e-10:
            break
        if f1 < f2:
            lo = x1
            x1, f1, mu1 = x2, f2, mu2
            x2 = lo + _INVPHI * (hi - lo)
            mu2, f2 = _profile_value(nh, sh, math.exp(x2), mu1, max_iters)
            if f2 > best_ell:
                best_ell, best_mu, best_m = f2, mu2, math.exp(x2)
        else:
            hi = x2
            x2, f2, mu2 = x1, f1, mu1
            x1 = hi - _INVPHI * (hi - lo)
            mu1, f1 = _profile_value(nh, sh, math.exp(x1), mu2, max_iters)
            if f1 > best_ell:
                best_ell, best_mu, best_m = f1, mu1, math.exp(x1)
    return best_mu, best_m, best_ell


@njit(cache=True)
def _fit_warm(nh, sh, m_max, mu0, m0, max_iters):
    """Local refinement from a previous optimum: coordinate ascent.

    Exact concave Newton over mu alternates with a safeguarded Newton step on
    ln M (backtracked so ell never decreases).  Used by the per-step refits,
    where the optimum moves O(1/n) per observation.
    """
    ln_cap = math.log(m_max)
    big_l = math.log(m0) if 0.0 < m0 <= m_max else math.log(10.0)
    mu = mu0
    mu, ell = _profile_value(nh, sh, math.exp(big_l), mu, max_iters)
    for _ in range(12):
        big_m = math.exp(big_l)
        a = mu * big_m
        b = (1.0 - mu) * big_m
        d1 = 0.0
        d2 = 0.0
        for h in range(nh.shape[0]):
            n = nh[h]
            if n > 0:
                s = sh[h]
                f = n - s
                da = digamma(a + s) - digamma(a)
                db = digamma(b + f) - digamma(b)
                dn = digamma(big_m + n) - digamma(big_m)
                d1 += mu * da + (1.0 - mu) * db - dn
                d2 += (
                    mu * mu * (trigamma(a + s) - trigamma(a))
                    + (1.0 - mu) * (1.0 - mu) * (trigamma(b + f) - trigamma(b))
                    - (trigamma(big_m + n) - trigamma(big_m))
                )
        grad = big_m * d1                       # d ell / d ln M
        hess = grad + big_m * big_m * d2        # d^2 ell / d ln M^2
        if hess < 0.0:
            delta = -grad / hess
        else:
            delta = 0.5 if grad > 0.0 else -0.5
        if delta > 1.0:
            delta = 1.0
        elif delta < -1.0:
            delta = -1.0
        moved = False
        for _bt in range(12):
            cand_l = big_l + delta
            if cand_l > ln_cap:
                cand_l = ln_cap
            cand_mu, cand_ell = _profile_value(nh, sh, math.exp(cand_l), mu, max_iters)
            if cand_ell >= ell:
                improved = cand_ell - ell
                big_l, mu, ell = cand_l, cand_mu, cand_ell
                moved = True
                if improved < 1e-12 or abs(delta) < 1e-10:
                    return mu, math.exp(big_l), ell
                break
            delta *= 0.5
            if abs(delta) < 1e-12:
                break
        if not moved:
            break
    return mu, math.exp(big_l), ell


@njit(cache=True)
def _fit_core(nh, sh, m_max, tol, varsigma, mu0, m0, warm, max_iters):
    """Full fit with degeneracy handling.

    Returns (alpha, beta, ell, status, mu, M); mu and M echo the interior
    candidate so callers can warm-start the next refit.  Status codes:
    0 interior, 1 pooled boundary (alpha = beta = inf, ell = boundary sup),
    2 default prior (no data, or all successes / all failures).
    """
    n_tot = np.int64(0)
    s_tot = np.int64(0)
    for h in range(nh.shape[0]):
        n_tot += nh[h]
        s_tot += sh[h]
    if n_tot == 0:
        return varsigma, varsigma, 0.0, STATUS_DEFAULT, 0.5, 10.0
    if s_tot == 0 or s_tot == n_tot:
        alpha = s_tot + varsigma
        beta = (n_tot - s_tot) + varsigma
        return alpha, beta, _ell(nh, sh, alpha, beta), STATUS_DEFAULT, 0.5, 10.0

    bsup = n_tot * binary_entropy(s_tot / n_tot)
    if warm:
        mu, big_m, ell = _fit_warm(nh, sh, m_max, mu0, m0, max_iters)
    else:
        mu, big_m, ell = _fit_cold(nh, sh, m_max, max_iters)
    if big_m >= m_max * (1.0 - tol) or ell < bsup - tol:
        return math.inf, math.inf, bsup, STATUS_POOLED, mu, big_m
    return mu * big_m, (1.0 - mu) * big_m, ell, STATUS_INTERIOR, mu, big_m
