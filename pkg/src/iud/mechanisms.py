"""Information-borrowing terms and urn proportions.

Each treatment keeps one urn per stratum whose white/red masses are the cell's
success/failure counts plus a borrowing term (phi_s, phi_f) computed from the
rest of the system.  The urn proportion

    P = (phi_s + s) / (phi_s + phi_f + n),    rho = n / (phi_s + phi_f + n)

is the convex mix of the cell's own rate (weight rho) and the borrowed rate.
Variants: no borrowing (phi = 0, the complete-randomization comparator),
vanishing borrowing (outside-stratum rate weighted by a bounded psi of the
outside sample size), treatment similarity (pool strata whose observed rates
differ by at most a shrinking threshold c), and the model-based mechanism
(phi = fitted Beta prior parameters, optionally on gap-clustered strata).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Union

import numpy as np
from numba import njit

from iud.betabinom import (
    AggregatedSample,
    MleOptions,
    MleStatus,
    cluster_strata,
    fit_mle,
    fit_mle_clustered,
)
from iud.trial import CountsTensor, theta_hat, theta_hat_matrix, theta_hat_outside

MECH_NONE = 0
MECH_VANISHING = 1
MECH_SIMILARITY = 2
MECH_MODEL = 3
MECH_MODEL_CLUSTERED = 4

PSI_MIN = 0
PSI_EXP = 1
PSI_RATIONAL = 2


class Mechanism(Enum):
    NO_BORROWING = "no_borrowing"
    VANISHING = "vanishing"
    SIMILARITY = "similarity"
    MODEL_BASED = "model_based"
    MODEL_BASED_CLUSTERED = "model_based_clustered"

    @property
    def code(self) -> int:
        return _MECH_CODES[self]

    @classmethod
    def parse(cls, name: str) -> "Mechanism":
        key = name.strip().lower()
        if key in _MECH_ALIASES:
            return _MECH_ALIASES[key]
        raise ValueError(f"unknown mechanism {name!r}")


_MECH_CODES = {
    Mechanism.NO_BORROWING: MECH_NONE,
    Mechanism.VANISHING: MECH_VANISHING,
    Mechanism.SIMILARITY: MECH_SIMILARITY,
    Mechanism.MODEL_BASED: MECH_MODEL,
    Mechanism.MODEL_BASED_CLUSTERED: MECH_MODEL_CLUSTERED,
}

_MECH_ALIASES = {m.value: m for m in Mechanism}
_MECH_ALIASES.update(
    {"iud1": Mechanism.VANISHING, "iud2": Mechanism.SIMILARITY, "iud3": Mechanism.MODEL_BASED}
)


class PsiKind(Enum):
    MIN = "min"
    EXP = "exp"
    RATIONAL = "rational"

    @property
    def code(self) -> int:
        return {PsiKind.MIN: PSI_MIN, PsiKind.EXP: PSI_EXP, PsiKind.RATIONAL: PSI_RATIONAL}[self]

    @classmethod
    def parse(cls, name: str) -> "PsiKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown psi kind {name!r}") from None


def default_c_rule(step: int) -> float:
    """Similarity threshold: +inf for the first step, then 1/ln(step)."""
    if step < 2:
        return math.inf
    return 1.0 / math.log(step)


@dataclass
class MechanismParams:
    variant: Mechanism = Mechanism.VANISHING
    psi_kind: PsiKind = PsiKind.RATIONAL
    psi_max: float = 10.0
    c_rule: Union[str, Callable[[int], float]] = "inv_log"
    mle: MleOptions = field(default_factory=MleOptions)

    def __post_init__(self) -> None:
        if not self.psi_max > 0.0:
            raise ValueError("psi_max must be positive")
        if isinstance(self.c_rule, str) and self.c_rule != "inv_log":
            raise ValueError(f"unknown c_rule {self.c_rule!r}")

    def c_value(self, step: int) -> float:
        if callable(self.c_rule):
            c = float(self.c_rule(step))
            if not c > 0.0:
                raise ValueError("c_rule must produce positive values")
            return c
        return default_c_rule(step)


@dataclass(frozen=True)
class BorrowTerms:
    """Borrowing masses for one cell.

    ``pooled_mean`` is set when the model-based fit diverged (alpha + beta at
    infinity): the urn proportion is then that pooled rate exactly, with
    rho = 0, and phi_s/phi_f hold the +inf sentinels.
    """

    phi_s: float
    phi_f: float
    pooled_mean: float | None = None


def psi_eval(kind: PsiKind, x: float, psi_max: float) -> float:
    """Bounded non-decreasing weight with psi(0) = 0 and values in [0, psi_max]."""
    if x < 0.0:
        raise ValueError("x must be non-negative")
    if not psi_max > 0.0:
        raise ValueError("psi_max must be positive")
    return float(_psi(kind.code, float(x), psi_max))


def borrow_vanishing(counts: CountsTensor, j: int, h: int, params: MechanismParams) -> BorrowTerms:
    """Outside-stratum rate carrying total weight psi(n_outside)."""
    counts.check_indices(j, h)
    n_out = int(counts.n[j].sum() - counts.n[j, h])
    rate_out = theta_hat_outside(counts, j, h)
    w = _psi(params.psi_kind.code, float(n_out), params.psi_max)
    return BorrowTerms(rate_out * w, (1.0 - rate_out) * w)


def similarity_set(counts: CountsTensor, j: int, h: int, c: float) -> set[int]:
    """Strata k != h with |theta_hat[j,k] - theta_hat[j,h]| <= c."""
    counts.check_indices(j, h)
    if not c > 0.0:
        raise ValueError("c must be positive")
    own = theta_hat(counts, j, h)
    return {
        k
        for k in range(counts.num_strata)
        if k != h and abs(theta_hat(counts, j, k) - own) <= c
    }


def borrow_similarity(counts: CountsTensor, j: int, h: int, c: float) -> BorrowTerms:
    """Raw success/failure sums over the similar strata; (0, 0) when none are similar."""
    members = similarity_set(counts, j, h, c)
    phi_s = float(sum(int(counts.s[j, k]) for k in members))
    phi_f = float(sum(int(counts.f[j, k]) for k in members))
    return BorrowTerms(phi_s, phi_f)


def borrow_model_based(
    counts: CountsTensor, j: int, opts: MleOptions | None = None
) -> BorrowTerms:
    """Fitted Beta prior parameters for treatment j, shared by all its strata."""
    result = fit_mle(AggregatedSample.from_counts(counts, j), opts)
    if result.status is MleStatus.POOLED_BOUNDARY:
        return BorrowTerms(math.inf, math.inf, pooled_mean=result.mean)
    return BorrowTerms(result.alpha, result.beta)


def similarity_effective_n(counts: CountsTensor, j: int, h: int, c: float) -> int:
    """Own plus similar-strata sample size, the scaling of the similarity-mechanism CLT."""
    members = similarity_set(counts, j, h, c)
    return int(counts.n[j, h]) + int(sum(int(counts.n[j, k]) for k in members))


def urn_proportion(counts: CountsTensor, terms: BorrowTerms, j: int, h: int) -> tuple[float, float]:
    """(P, rho) for one cell; an entirely empty urn returns the balanced (0.5, 0)."""
    counts.check_indices(j, h)
    if terms.pooled_mean is not None:
        return float(terms.pooled_mean), 0.0
    if not (terms.phi_s >= 0.0 and terms.phi_f >= 0.0):
        raise ValueError("borrow terms must be non-negative")
    s = float(counts.s[j, h])
    n = float(counts.n[j, h])
    denom = terms.phi_s + terms.phi_f + n
    if denom == 0.0:
        return 0.5, 0.0
    return (terms.phi_s + s) / denom, n / denom


def urn_proportions_all(
    counts: CountsTensor, params: MechanismParams, step: int
) -> tuple[np.ndarray, np.ndarray]:
    """(P, rho) matrices for every cell under the active mechanism.

    Model-based variants fit one prior per treatment and reuse it across
    strata; the clustered variant additionally replaces each cell's own counts
    by its block sums.
    """
    num_t, num_s = counts.num_treatments, counts.num_strata
    p_mat = np.empty((num_t, num_s), dtype=np.float64)
    rho_mat = np.empty((num_t, num_s), dtype=np.float64)
    variant = params.variant

    if variant in (Mechanism.MODEL_BASED, Mechanism.MODEL_BASED_CLUSTERED):
        rates = theta_hat_matrix(counts)
        for j in range(num_t):
            sample = AggregatedSample.from_counts(counts, j)
            if variant is Mechanism.MODEL_BASED:
                blocks = [[h] for h in range(num_s)]
                result = fit_mle(sample, params.mle)
            else:
                blocks = cluster_strata(rates[j], params.c_value(step))
                result = fit_mle_clustered(sample, blocks, params.mle)
            block_of = {h: b for b, block in enumerate(blocks) for h in block}
            n_b = [float(sample.n[list(block)].sum()) for block in blocks]
            s_b = [float(sample.s[list(block)].sum()) for block in blocks]
            for h in range(num_s):
                if result.status is MleStatus.POOLED_BOUNDARY:
                    p_mat[j, h] = result.mean
                    rho_mat[j, h] = 0.0
                else:
                    nb = n_b[block_of[h]]
                    sb = s_b[block_of[h]]
                    denom = result.alpha + result.beta + nb
                    p_mat[j, h] = (result.alpha + sb) / denom
                    rho_mat[j, h] = nb / denom
        return p_mat, rho_mat

    for j in range(num_t):
        for h in range(num_s):
            if variant is Mechanism.NO_BORROWING:
                terms = BorrowTerms(0.0, 0.0)
            elif variant is Mechanism.VANISHING:
                terms = borrow_vanishing(counts, j, h, params)
            else:
                terms = borrow_similarity(counts, j, h, params.c_value(step))
            p_mat[j, h], rho_mat[j, h] = urn_proportion(counts, terms, j, h)
    return p_mat, rho_mat


# --- numba kernels shared with the simulation engine ------------------------


@njit(cache=True)
def _psi(kind: int, x: float, psi_max: float) -> float:
    if x <= 0.0:
        return 0.0
    if kind == PSI_MIN:
        return min(x, psi_max)
    if kind == PSI_EXP:
        return psi_max * (1.0 - math.exp(-x / psi_max))
    return x * psi_max / (x + psi_max)


@njit(cache=True)
def _p_cell_simple(s_arr, f_arr, j, h, mech, psi_kind, psi_max, c):
    """(P, rho) for the no-borrowing / vanishing / similarity mechanisms."""
    s = float(s_arr[j, h])
    n = float(s_arr[j, h] + f_arr[j, h])
    phi_s = 0.0
    phi_f = 0.0
    if mech == MECH_VANISHING:
        s_out = 0.0
        n_out = 0.0
        for k in range(s_arr.shape[1]):
            if k != h:
                s_out += s_arr[j, k]
                n_out += s_arr[j, k] + f_arr[j, k]
        if n_out > 0.0:
            rate_out = s_out / n_out
            w = _psi(psi_kind, n_out, psi_max)
            phi_s = rate_out * w
            phi_f = (1.0 - rate_out) * w
    elif mech == MECH_SIMILARITY:
        own = s / n if n > 0.0 else 0.0
        for k in range(s_arr.shape[1]):
            if k != h:
                nk = float(s_arr[j, k] + f_arr[j, k])
                rk = float(s_arr[j, k]) / nk if nk > 0.0 else 0.0
                if abs(rk - own) <= c:
                    phi_s += s_arr[j, k]
                    phi_f += f_arr[j, k]
    denom = phi_s + phi_f + n
    if denom == 0.0:
        return 0.5, 0.0
    return (phi_s + s) / denom, n / denom
