"""Compiled single-replicate trial loop.

One patient per iteration: covariate draw, urn proportions from the current
counts, randomized assignment, Bernoulli outcome, count update.  All
randomness is consumed from a pre-drawn (n, 3) uniform array so a replicate is
a pure function of its generator state.

Model-based mechanisms keep per-treatment prior fits as loop state: after each
outcome only the assigned treatment is refit, warm-started from the previous
optimum, with periodic cold re-anchoring; snapshots always use cold fits so
traces match the public fitting routine bit for bit.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from iud.allocation import _f_eval
from iud.betabinom import STATUS_POOLED, _fit_core
from iud.mechanisms import MECH_MODEL, MECH_MODEL_CLUSTERED, _p_cell_simple

_COLD_REFIT_EVERY = 256


@njit(cache=True)
def _stable_partition(s_arr, f_arr, j, c, lab_row):
    """Label strata by maximal runs of sorted observed rates with gaps <= c.

    Insertion sort keeps ties in stratum order; returns the number of blocks.
    """
    num_s = s_arr.shape[1]
    th = np.empty(num_s, dtype=np.float64)
    for h in range(num_s):
        n = s_arr[j, h] + f_arr[j, h]
        th[h] = s_arr[j, h] / n if n > 0 else 0.0
    order = np.empty(num_s, dtype=np.int64)
    for h in range(num_s):
        order[h] = h
    for a in range(1, num_s):
        key = order[a]
        kv = th[key]
        b = a - 1
        while b >= 0 and th[order[b]] > kv:
            order[b + 1] = order[b]
            b -= 1
        order[b + 1] = key
    blk = 0
    lab_row[order[0]] = 0
    for pos in range(1, num_s):
        if th[order[pos]] - th[order[pos - 1]] > c:
            blk += 1
        lab_row[order[pos]] = blk
    return blk + 1


@njit(cache=True)
def _refit(
    s_arr, f_arr, j, mech, c,
    alpha, beta, pooled, pmean, wmu, wm, lab, bn, bs, nblocks,
    m_max, tol, varsigma, max_iters, cold,
):
    """Refresh the prior fit (and block sums) of one treatment."""
    num_s = s_arr.shape[1]
    if mech == MECH_MODEL_CLUSTERED:
        nb = _stable_partition(s_arr, f_arr, j, c, lab[j])
        nblocks[j] = nb
        for b in range(nb):
            bn[j, b] = 0
            bs[j, b] = 0
        for h in range(num_s):
            bn[j, lab[j, h]] += s_arr[j, h] + f_arr[j, h]
            bs[j, lab[j, h]] += s_arr[j, h]
        nh = bn[j, :nb].copy()
        sh = bs[j, :nb].copy()
    else:
        nh = np.empty(num_s, dtype=np.int64)
        sh = np.empty(num_s, dtype=np.int64)
        for h in range(num_s):
            nh[h] = s_arr[j, h] + f_arr[j, h]
            sh[h] = s_arr[j, h]
    a, b_, _ell_val, status, mu, big_m = _fit_core(
        nh, sh, m_max, tol, varsigma, wmu[j], wm[j], not cold, max_iters
    )
    wmu[j] = mu
    wm[j] = big_m
    if status == STATUS_POOLED:
        n_tot = np.int64(0)
        s_tot = np.int64(0)
        for h in range(nh.shape[0]):
            n_tot += nh[h]
            s_tot += sh[h]
        pooled[j] = 1
        pmean[j] = s_tot / n_tot
    else:
        pooled[j] = 0
        alpha[j] = a
        beta[j] = b_


@njit(cache=True)
def _p_cell_model(
    s_arr, f_arr, j, h, mech, alpha, beta, pooled, pmean, lab, bn, bs
):
    if pooled[j] == 1:
        return pmean[j], 0.0
    if mech == MECH_MODEL_CLUSTERED:
        nb = float(bn[j, lab[j, h]])
        sb = float(bs[j, lab[j, h]])
    else:
        nb = float(s_arr[j, h] + f_arr[j, h])
        sb = float(s_arr[j, h])
    denom = alpha[j] + beta[j] + nb
    return (alpha[j] + sb) / denom, nb / denom


@njit(cache=True)
def trial_loop(
    uniforms, theta, cum_p,
    mech, psi_kind, psi_max, c_vals, varsigma,
    m_max, mle_tol, mle_iters,
    f_kind, f_gamma, f_eps, f_cap,
    checkpoints,
):
    num_t = theta.shape[0]
    num_s = theta.shape[1]
    n = uniforms.shape[0]
    num_cp = checkpoints.shape[0]

    s_arr = np.zeros((num_t, num_s), dtype=np.int64)
    f_arr = np.zeros((num_t, num_s), dtype=np.int64)
    s_snap = np.zeros((num_cp, num_t, num_s), dtype=np.int64)
    f_snap = np.zeros((num_cp, num_t, num_s), dtype=np.int64)
    p_snap = np.zeros((num_cp, num_t, num_s), dtype=np.float64)

    model = mech == MECH_MODEL or mech == MECH_MODEL_CLUSTERED
    alpha = np.full(num_t, varsigma)
    beta = np.full(num_t, varsigma)
    pooled = np.zeros(num_t, dtype=np.uint8)
    pmean = np.zeros(num_t, dtype=np.float64)
    wmu = np.full(num_t, 0.5)
    wm = np.full(num_t, 10.0)
    updates = np.zeros(num_t, dtype=np.int64)
    lab = np.zeros((num_t, num_s), dtype=np.int64)
    old_lab = np.zeros(num_s, dtype=np.int64)
    nblocks = np.ones(num_t, dtype=np.int64)
    bn = np.zeros((num_t, num_s), dtype=np.int64)
    bs = np.zeros((num_t, num_s), dtype=np.int64)

    prow = np.empty(num_t, dtype=np.float64)
    wrow = np.empty(num_t, dtype=np.float64)

    snap_i = 0
    for i in range(n):
        u_cov = uniforms[i, 0]
        u_asn = uniforms[i, 1]
        u_out = uniforms[i, 2]

        h = 0
        while h < num_s - 1 and u_cov >= cum_p[h]:
            h += 1

        if model:
            for j in range(num_t):
                prow[j], _ = _p_cell_model(
                    s_arr, f_arr, j, h, mech, alpha, beta, pooled, pmean, lab, bn, bs
                )
        else:
            for j in range(num_t):
                prow[j], _ = _p_cell_simple(
                    s_arr, f_arr, j, h, mech, psi_kind, psi_max, c_vals[i]
                )

        tot = 0.0
        for j in range(num_t):
            w = _f_eval(f_kind, prow[j], f_gamma, f_eps, f_cap)
            wrow[j] = w
            tot += w
        target = u_asn * tot
        jsel = 0
        acc = wrow[0]
        while jsel < num_t - 1 and acc <= target:
            jsel += 1
            acc += wrow[jsel]

        if u_out < theta[jsel, h]:
            s_arr[jsel, h] += 1
        else:
            f_arr[jsel, h] += 1

        if model:
            c_next = c_vals[i + 1]
            updates[jsel] += 1
            cold = updates[jsel] % _COLD_REFIT_EVERY == 0
            _refit(
                s_arr, f_arr, jsel, mech, c_next,
                alpha, beta, pooled, pmean, wmu, wm, lab, bn, bs, nblocks,
                m_max, mle_tol, varsigma, mle_iters, cold,
            )
            if mech == MECH_MODEL_CLUSTERED:
                # a shrinking threshold can re-partition a treatment whose
                # counts did not change
                for j in range(num_t):
                    if j == jsel:
                        continue
                    for hh in range(num_s):
                        old_lab[hh] = lab[j, hh]
                    nb = _stable_partition(s_arr, f_arr, j, c_next, lab[j])
                    changed = nb != nblocks[j]
                    if not changed:
                        for hh in range(num_s):
                            if lab[j, hh] != old_lab[hh]:
                                changed = True
                                break
                    if changed:
                        _refit(
                            s_arr, f_arr, j, mech, c_next,
                            alpha, beta, pooled, pmean, wmu, wm, lab, bn, bs, nblocks,
                            m_max, mle_tol, varsigma, mle_iters, False,
                        )

        if snap_i < num_cp and i + 1 == checkpoints[snap_i]:
            if model:
                for j in range(num_t):
                    _refit(
                        s_arr, f_arr, j, mech, c_vals[i + 1],
                        alpha, beta, pooled, pmean, wmu, wm, lab, bn, bs, nblocks,
                        m_max, mle_tol, varsigma, mle_iters, True,
                    )
            for j in range(num_t):
                for hh in range(num_s):
                    s_snap[snap_i, j, hh] = s_arr[j, hh]
                    f_snap[snap_i, j, hh] = f_arr[j, hh]
                    if model:
                        p, _ = _p_cell_model(
                            s_arr, f_arr, j, hh, mech, alpha, beta, pooled, pmean, lab, bn, bs
                        )
                    else:
                        p, _ = _p_cell_simple(
                            s_arr, f_arr, j, hh, mech, psi_kind, psi_max, c_vals[i + 1]
                        )
                    p_snap[snap_i, j, hh] = p
            snap_i += 1

    return s_snap, f_snap, p_snap
