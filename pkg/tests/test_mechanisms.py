import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iud.betabinom import MleOptions, MleStatus, fit_mle, AggregatedSample
from iud.mechanisms import (
    BorrowTerms,
    Mechanism,
    MechanismParams,
    PsiKind,
    borrow_model_based,
    borrow_similarity,
    borrow_vanishing,
    default_c_rule,
    psi_eval,
    similarity_effective_n,
    similarity_set,
    urn_proportion,
    urn_proportions_all,
)
from iud.trial import CountsTensor, theta_hat, theta_hat_matrix

from oracles import grid_argmax_refined


def counts_of(s_rows, f_rows) -> CountsTensor:
    return CountsTensor(np.array(s_rows), np.array(f_rows))


# --- psi ----------------------------------------------------------------------


def test_psi_examples():
    assert psi_eval(PsiKind.RATIONAL, 10.0, 10.0) == pytest.approx(5.0)
    assert psi_eval(PsiKind.MIN, 25.0, 10.0) == 10.0
    for kind in PsiKind:
        assert psi_eval(kind, 0.0, 10.0) == 0.0


def test_psi_exp_value():
    assert psi_eval(PsiKind.EXP, 10.0, 10.0) == pytest.approx(10.0 * (1.0 - math.exp(-1.0)))


def test_psi_rejects_negative_input():
    with pytest.raises(ValueError):
        psi_eval(PsiKind.MIN, -0.1, 10.0)


@given(
    st.sampled_from(list(PsiKind)),
    st.floats(0.0, 1e6),
    st.floats(0.0, 1e6),
    st.floats(0.01, 100.0),
)
def test_psi_bounded_and_monotone(kind, x1, x2, psi_max):
    lo, hi = sorted((x1, x2))
    v_lo, v_hi = psi_eval(kind, lo, psi_max), psi_eval(kind, hi, psi_max)
    assert 0.0 <= v_lo <= v_hi <= psi_max + 1e-12


# --- c rule ---------------------------------------------------------------------


def test_default_c_rule():
    assert math.isinf(default_c_rule(0))
    assert math.isinf(default_c_rule(1))
    assert default_c_rule(2) == pytest.approx(1.0 / math.log(2.0))
    assert default_c_rule(200) == pytest.approx(1.0 / math.log(200.0))
    assert default_c_rule(3) < default_c_rule(2)


# --- borrowing terms -------------------------------------------------------------


def test_borrow_vanishing_example():
    # outside stratum 0: 4 successes of 10, psi_rational(10) = 5
    counts = counts_of([[0, 4]], [[0, 6]])
    terms = borrow_vanishing(counts, 0, 0, MechanismParams(psi_kind=PsiKind.RATIONAL, psi_max=10))
    assert terms.phi_s == pytest.approx(2.0)
    assert terms.phi_f == pytest.approx(3.0)


def test_borrow_vanishing_degenerate_cases():
    empty = CountsTensor.zeros(1, 3)
    terms = borrow_vanishing(empty, 0, 0, MechanismParams())
    assert (terms.phi_s, terms.phi_f) == (0.0, 0.0)
    single = counts_of([[3]], [[2]])
    terms = borrow_vanishing(single, 0, 0, MechanismParams())
    assert (terms.phi_s, terms.phi_f) == (0.0, 0.0)


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=2, max_size=6))
def test_borrow_vanishing_splits_psi_mass(cells):
    s_row = [c[0] for c in cells]
    f_row = [c[1] for c in cells]
    counts = counts_of([s_row], [f_row])
    params = MechanismParams(psi_kind=PsiKind.RATIONAL, psi_max=10)
    terms = borrow_vanishing(counts, 0, 0, params)
    n_out = sum(s_row[1:]) + sum(f_row[1:])
    assert terms.phi_s + terms.phi_f == pytest.approx(
        psi_eval(params.psi_kind, n_out, params.psi_max)
    )
    if n_out > 0:
        assert terms.phi_s / (terms.phi_s + terms.phi_f) == pytest.approx(
            sum(s_row[1:]) / n_out
        )


def test_similarity_set_examples():
    counts = counts_of([[50, 52, 70]], [[50, 48, 30]])  # rates .50 .52 .70
    assert similarity_set(counts, 0, 0, 0.05) == {1}
    assert similarity_set(counts, 0, 0, 1.0) == {1, 2}
    assert similarity_set(counts_of([[1]], [[1]]), 0, 0, 0.5) == set()


def test_borrow_similarity_examples():
    counts = counts_of([[0, 5]], [[0, 5]])
    terms = borrow_similarity(counts, 0, 0, 1.0)
    assert (terms.phi_s, terms.phi_f) == (5.0, 5.0)

    far = counts_of([[90, 5]], [[10, 95]])  # rates .9 vs .05: no pooling at c=.1
    terms = borrow_similarity(far, 0, 0, 0.1)
    assert (terms.phi_s, terms.phi_f) == (0.0, 0.0)

    three = counts_of([[5, 2, 3]], [[5, 1, 1]])
    terms = borrow_similarity(three, 0, 0, 1.0)
    assert (terms.phi_s, terms.phi_f) == (5.0, 2.0)


def test_similarity_effective_n():
    counts = counts_of([[50, 52, 70]], [[50, 48, 30]])
    assert similarity_effective_n(counts, 0, 0, 0.05) == 100 + 100
    assert similarity_effective_n(counts, 0, 0, 1.0) == 300


def test_borrow_model_based_no_data_uses_default_prior():
    counts = CountsTensor.zeros(2, 4)
    terms = borrow_model_based(counts, 0, MleOptions(varsigma=1.5))
    assert (terms.phi_s, terms.phi_f) == (1.5, 1.5)
    assert terms.pooled_mean is None


def test_borrow_model_based_pooled_sample():
    counts = counts_of([[5, 5]], [[5, 5]])
    terms = borrow_model_based(counts, 0)
    assert terms.pooled_mean == pytest.approx(0.5)
    for h in (0, 1):
        p, rho = urn_proportion(counts, terms, 0, h)
        assert (p, rho) == (0.5, 0.0)


def test_borrow_model_based_interior_matches_refined_grid():
    counts = counts_of([[9, 1]], [[1, 9]])
    terms = borrow_model_based(counts, 0)
    assert terms.pooled_mean is None
    a_ref, b_ref = grid_argmax_refined([10, 10], [9, 1])
    assert terms.phi_s == pytest.approx(a_ref, abs=1e-3)
    assert terms.phi_f == pytest.approx(b_ref, abs=1e-3)


# --- urn proportion ---------------------------------------------------------------


def test_urn_proportion_convex_identity_example():
    counts = counts_of([[3]], [[2]])  # s=3, n=5
    p, rho = urn_proportion(counts, BorrowTerms(2.0, 3.0), 0, 0)
    assert p == pytest.approx(0.5)
    assert rho == pytest.approx(0.5)
    borrowed_rate = 2.0 / 5.0
    assert p == pytest.approx(rho * theta_hat(counts, 0, 0) + (1 - rho) * borrowed_rate)


def test_urn_proportion_empty_urn_is_balanced():
    counts = CountsTensor.zeros(1, 1)
    assert urn_proportion(counts, BorrowTerms(0.0, 0.0), 0, 0) == (0.5, 0.0)


def test_urn_proportion_no_borrowing_recovers_theta_hat():
    counts = counts_of([[3]], [[2]])
    p, rho = urn_proportion(counts, BorrowTerms(0.0, 0.0), 0, 0)
    assert p == pytest.approx(0.6)
    assert rho == 1.0


def test_urn_proportion_rejects_negative_terms():
    with pytest.raises(ValueError):
        urn_proportion(counts_of([[1]], [[1]]), BorrowTerms(-0.5, 1.0), 0, 0)


# --- full matrices ------------------------------------------------------------------


def params_for(variant, **kw) -> MechanismParams:
    return MechanismParams(variant=variant, **kw)


def test_all_no_borrowing_equals_theta_hat():
    counts = counts_of([[3, 0], [1, 4]], [[2, 0], [3, 1]])
    p, rho = urn_proportions_all(counts, params_for(Mechanism.NO_BORROWING), step=10)
    rates = theta_hat_matrix(counts)
    assert p[0, 0] == pytest.approx(rates[0, 0])
    assert p[1, 0] == pytest.approx(rates[1, 0])
    assert p[1, 1] == pytest.approx(rates[1, 1])
    assert p[0, 1] == 0.5  # empty cell
    assert rho[0, 1] == 0.0


@pytest.mark.parametrize("variant", list(Mechanism))
def test_all_empty_counts_are_balanced(variant):
    counts = CountsTensor.zeros(2, 3)
    p, rho = urn_proportions_all(counts, params_for(variant), step=0)
    assert (p == 0.5).all()
    assert (rho == 0.0).all()


def test_similarity_pools_identical_strata():
    counts = counts_of([[6, 6]], [[4, 4]])
    p, _ = urn_proportions_all(counts, params_for(Mechanism.SIMILARITY), step=20)
    assert p[0, 0] == pytest.approx(0.6)
    assert p[0, 1] == pytest.approx(0.6)


def test_model_based_pooled_status_gives_pooled_mean_everywhere():
    counts = counts_of([[5, 5], [2, 2]], [[5, 5], [8, 8]])
    p, rho = urn_proportions_all(counts, params_for(Mechanism.MODEL_BASED), step=40)
    assert np.allclose(p[0], 0.5)
    assert np.allclose(p[1], 0.2)
    assert np.allclose(rho, 0.0)


def test_model_clustered_blocks_share_p():
    counts = counts_of([[9, 9, 1, 1]], [[1, 1, 9, 9]])
    p, _ = urn_proportions_all(counts, params_for(Mechanism.MODEL_BASED_CLUSTERED), step=1000)
    # c at step 1000 is ~0.145: strata {0,1} and {2,3} cluster separately
    assert p[0, 0] == pytest.approx(p[0, 1])
    assert p[0, 2] == pytest.approx(p[0, 3])
    assert p[0, 0] > 0.6 > 0.4 > p[0, 2]


random_counts = st.lists(
    st.tuples(st.integers(0, 15), st.integers(0, 15)),
    min_size=6,
    max_size=6,
).map(
    lambda cells: CountsTensor(
        np.array([[c[0] for c in cells[:3]], [c[0] for c in cells[3:]]]),
        np.array([[c[1] for c in cells[:3]], [c[1] for c in cells[3:]]]),
    )
)


@settings(max_examples=30)
@given(random_counts, st.sampled_from(list(Mechanism)), st.integers(1, 500))
def test_p_and_rho_stay_in_unit_interval(counts, variant, step):
    p, rho = urn_proportions_all(counts, params_for(variant), step=step)
    assert ((p >= 0.0) & (p <= 1.0)).all()
    assert ((rho >= 0.0) & (rho <= 1.0)).all()


@settings(max_examples=30)
@given(random_counts, st.integers(2, 500))
def test_vanishing_borrowing_weight_bound(counts, step):
    params = params_for(Mechanism.VANISHING, psi_max=10.0)
    p, rho = urn_proportions_all(counts, params, step=step)
    rates = theta_hat_matrix(counts)
    n = counts.n
    for j in range(2):
        for h in range(3):
            if n[j, h] == 0:
                continue
            slack = 1.0 - rho[j, h]
            assert abs(p[j, h] - rates[j, h]) <= slack + 1e-12
            assert slack <= 10.0 / (10.0 + n[j, h]) + 1e-12


@settings(max_examples=30)
@given(random_counts, st.integers(2, 500))
def test_similarity_pooled_rate_identity(counts, step):
    params = params_for(Mechanism.SIMILARITY)
    c = params.c_value(step)
    p, _ = urn_proportions_all(counts, params, step=step)
    for j in range(2):
        for h in range(3):
            members = similarity_set(counts, j, h, c)
            if not members:
                continue
            pool = sorted(members | {h})
            s_pool = sum(int(counts.s[j, k]) for k in pool)
            n_pool = sum(int(counts.n[j, k]) for k in pool)
            if n_pool > 0:
                assert p[j, h] == pytest.approx(s_pool / n_pool)


@settings(max_examples=30)
@given(random_counts, st.integers(2, 500))
def test_success_failure_swap_mirrors_p_vanishing(counts, step):
    params = params_for(Mechanism.VANISHING)
    p, rho = urn_proportions_all(counts, params, step=step)
    swapped = CountsTensor(counts.f.copy(), counts.s.copy())
    p_sw, rho_sw = urn_proportions_all(swapped, params, step=step)
    assert np.allclose(p_sw, 1.0 - p, atol=1e-12)
    assert np.allclose(rho_sw, rho, atol=1e-12)


@settings(max_examples=30)
@given(random_counts, st.integers(2, 500))
def test_success_failure_swap_mirrors_p_similarity_on_occupied_cells(counts, step):
    # an empty cell keeps rate 0 on both sides of the swap (zero-count
    # convention), so its similarity set does not mirror; occupied cells do
    params = params_for(Mechanism.SIMILARITY)
    p, rho = urn_proportions_all(counts, params, step=step)
    swapped = CountsTensor(counts.f.copy(), counts.s.copy())
    p_sw, rho_sw = urn_proportions_all(swapped, params, step=step)
    occupied = counts.n > 0
    assert np.allclose(p_sw[occupied], 1.0 - p[occupied], atol=1e-12)
    assert np.allclose(rho_sw[occupied], rho[occupied], atol=1e-12)


def test_model_based_matches_direct_fit():
    counts = counts_of([[9, 5, 2], [1, 1, 1]], [[1, 5, 8], [9, 9, 9]])
    p, rho = urn_proportions_all(counts, params_for(Mechanism.MODEL_BASED), step=30)
    for j in range(2):
        res = fit_mle(AggregatedSample.from_counts(counts, j))
        for h in range(3):
            if res.status is MleStatus.POOLED_BOUNDARY:
                assert p[j, h] == pytest.approx(res.mean)
            else:
                n_cell = float(counts.n[j, h])
                expect = (res.alpha + counts.s[j, h]) / (res.alpha + res.beta + n_cell)
                assert p[j, h] == pytest.approx(expect)


def test_mechanism_aliases():
    assert Mechanism.parse("IUD1") is Mechanism.VANISHING
    assert Mechanism.parse("iud2") is Mechanism.SIMILARITY
    assert Mechanism.parse("iud3") is Mechanism.MODEL_BASED
    assert Mechanism.parse("no_borrowing") is Mechanism.NO_BORROWING
    with pytest.raises(ValueError):
        Mechanism.parse("bogus")
