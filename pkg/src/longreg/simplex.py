"""Dense two-phase primal simplex for the least-absolute-deviation programs.

Every solve shares one small structure: minimize the sum of K+1 deviation
variables subject to

    -D_0 - ratio * sum(T)  <= 0
    -D_0 + ratio * sum(T)  <= 0
    -D_k - (A T)_k         <= -r_k     k = 1..K
    -D_k + (A T)_k         <= +r_k     k = 1..K

with the N-vector T free and the deviations implicitly nonnegative. The
free variables are split into positive and negative parts, slacks turn the
inequalities into equalities, and rows with negative right-hand sides get
artificial variables for phase 1. Pivoting uses Bland's anti-cycling rule
(lowest eligible entering column, lowest basic index among ratio ties), so
the pivot sequence and therefore the result are fully deterministic.

The kernels are numba-compiled; the batch driver partitions problems into
fixed-size blocks, reuses one tableau per block and runs blocks in
parallel. Per-problem results do not depend on the thread count.

Status codes: 0 optimal, 1 pivot budget exceeded, 2 unbounded, 3 infeasible.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

COST_TOL = 1e-9
PIVOT_TOL = 1e-11
TIE_TOL = 1e-10
FEAS_TOL = 1e-7
BLOCK = 256

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_UNBOUNDED = 2
STATUS_INFEASIBLE = 3


@njit(cache=True)
def _pivot(tab, basis, nrow, ncol, p, q):
    inv = 1.0 / tab[p, q]
    for j in range(ncol):
        tab[p, j] *= inv
    tab[p, q] = 1.0
    for i in range(nrow):
        if i == p:
            continue
        f = tab[i, q]
        if f != 0.0:
            for j in range(ncol):
                tab[i, j] -= f * tab[p, j]
            tab[i, q] = 0.0


@njit(cache=True)
def _run_phase(tab, basis, m, rhs_col, enter_limit, maxiter):
    """Bland-rule pivoting until optimal. Returns (status, iterations)."""
    iters = 0
    while iters < maxiter:
        q = -1
        for j in range(enter_limit):
            if tab[m, j] < -COST_TOL:
                q = j
                break
        if q < 0:
            return STATUS_OK, iters
        p = -1
        best = 0.0
        for i in range(m):
            a = tab[i, q]
            if a > PIVOT_TOL:
                ratio = tab[i, rhs_col] / a
                if p < 0 or ratio < best - TIE_TOL:
                    best = ratio
                    p = i
                elif ratio <= best + TIE_TOL and basis[i] < basis[p]:
                    if ratio < best:
                        best = ratio
                    p = i
        if p < 0:
            return STATUS_UNBOUNDED, iters
        _pivot(tab, basis, m + 1, rhs_col + 1, p, q)
        basis[p] = q
        iters += 1
    return STATUS_MAXITER, iters


@njit(cache=True)
def _lad_core(design, ratio, rhs, tab, basis, tvec, dev):
    """Solve one program in place. tab is (2K+3, K+1+2N+2(2K+2)+1) or larger."""
    k_obs, n_lat = design.shape
    nx = k_obs + 1 + 2 * n_lat
    m = 2 * k_obs + 2
    slack0 = nx
    art0 = nx + m
    rhs_col = nx + 2 * m
    maxiter = 100 * (m + nx) + 100

    for i in range(m + 1):
        for j in range(rhs_col + 1):
            tab[i, j] = 0.0

    # constraint rows; T_n appears as Tp_n - Tm_n
    tab[0, 0] = -1.0
    tab[1, 0] = -1.0
    for n in range(n_lat):
        tab[0, k_obs + 1 + n] = -ratio
        tab[0, k_obs + 1 + n_lat + n] = ratio
        tab[1, k_obs + 1 + n] = ratio
        tab[1, k_obs + 1 + n_lat + n] = -ratio
    for k in range(k_obs):
        lo = 2 + k
        hi = 2 + k_obs + k
        tab[lo, 1 + k] = -1.0
        tab[hi, 1 + k] = -1.0
        for n in range(n_lat):
            w = design[k, n]
            tab[lo, k_obs + 1 + n] = -w
            tab[lo, k_obs + 1 + n_lat + n] = w
            tab[hi, k_obs + 1 + n] = w
            tab[hi, k_obs + 1 + n_lat + n] = -w
        tab[lo, rhs_col] = -rhs[k]
        tab[hi, rhs_col] = rhs[k]

    n_art = 0
    for i in range(m):
        if tab[i, rhs_col] < 0.0:
            for j in range(rhs_col + 1):
                tab[i, j] = -tab[i, j]
            tab[i, slack0 + i] = -1.0
            tab[i, art0 + n_art] = 1.0
            basis[i] = art0 + n_art
            n_art += 1
        else:
            tab[i, slack0 + i] = 1.0
            basis[i] = slack0 + i

    iters_total = 0
    if n_art > 0:
        for a in range(n_art):
            tab[m, art0 + a] = 1.0
        for i in range(m):
            if basis[i] >= art0:
                for j in range(rhs_col + 1):
                    tab[m, j] -= tab[i, j]
        status, iters = _run_phase(tab, basis, m, rhs_col, art0 + n_art, maxiter)
        iters_total += iters
        if status != STATUS_OK and status != STATUS_UNBOUNDED:
            return status, iters_total, 0.0
        if -tab[m, rhs_col] > FEAS_TOL:
            return STATUS_INFEASIBLE, iters_total, 0.0
        for i in range(m):
            if basis[i] >= art0:
                # degenerate basic artificial: swap for any real column
                for j in range(art0):
                    if abs(tab[i, j]) > 1e-9:
                        _pivot(tab, basis, m + 1, rhs_col + 1, i, j)
                        basis[i] = j
                        break

    for j in range(rhs_col + 1):
        tab[m, j] = 0.0
    for j in range(k_obs + 1):
        tab[m, j] = 1.0
    for i in range(m):
        if basis[i] <= k_obs:
            for j in range(rhs_col + 1):
                tab[m, j] -= tab[i, j]
    status, iters = _run_phase(tab, basis, m, rhs_col, art0, maxiter)
    iters_total += iters
    if status != STATUS_OK:
        return status, iters_total, 0.0

    for n in range(n_lat):
        tvec[n] = 0.0
    for k in range(k_obs + 1):
        dev[k] = 0.0
    for i in range(m):
        j = basis[i]
        v = tab[i, rhs_col]
        if j <= k_obs:
            dev[j] = v
        elif j < k_obs + 1 + n_lat:
            tvec[j - (k_obs + 1)] += v
        elif j < nx:
            tvec[j - (k_obs + 1 + n_lat)] -= v
    obj = 0.0
    for k in range(k_obs + 1):
        obj += dev[k]
    return STATUS_OK, iters_total, obj


@njit(cache=True)
def _workspace_cols(k_obs, n_lat):
    nx = k_obs + 1 + 2 * n_lat
    m = 2 * k_obs + 2
    return nx + 2 * m + 1


def lad_solve_single(design: np.ndarray, ratio: float, rhs: np.ndarray):
    """One program: returns (t, deviations, objective, status, iterations)."""
    design = np.ascontiguousarray(design, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    k_obs, n_lat = design.shape
    m = 2 * k_obs + 2
    tab = np.zeros((m + 1, _workspace_cols(k_obs, n_lat)))
    basis = np.zeros(m, dtype=np.int64)
    tvec = np.zeros(n_lat)
    dev = np.zeros(k_obs + 1)
    status, iters, obj = _lad_core(design, float(ratio), rhs, tab, basis, tvec, dev)
    return tvec, dev, obj, int(status), int(iters)


@njit(cache=True, parallel=True)
def _lad_batch(design, ratio, rhs_block, out_t, out_dev, out_obj, out_iter, out_status):
    n_prob = rhs_block.shape[0]
    k_obs, n_lat = design.shape
    m = 2 * k_obs + 2
    ncol = _workspace_cols(k_obs, n_lat)
    nblocks = (n_prob + BLOCK - 1) // BLOCK
    for b in prange(nblocks):
        tab = np.zeros((m + 1, ncol))
        basis = np.zeros(m, dtype=np.int64)
        tvec = np.zeros(n_lat)
        dev = np.zeros(k_obs + 1)
        lo = b * BLOCK
        hi = min(lo + BLOCK, n_prob)
        for p in range(lo, hi):
            status, iters, obj = _lad_core(design, ratio, rhs_block[p], tab, basis, tvec, dev)
            out_status[p] = status
            out_iter[p] = iters
            out_obj[p] = obj
            for n in range(n_lat):
                out_t[p, n] = tvec[n]
            for k in range(k_obs + 1):
                out_dev[p, k] = dev[k]


def lad_solve_batch(design: np.ndarray, ratio: float, rhs_block: np.ndarray):
    """Many programs sharing one design matrix, rows of rhs_block independent.

    Returns (t, deviations, objectives, iterations, statuses) stacked along
    the first axis. Results are independent of the numba thread count.
    """
    design = np.ascontiguousarray(design, dtype=np.float64)
    rhs_block = np.ascontiguousarray(rhs_block, dtype=np.float64)
    n_prob, k_obs = rhs_block.shape
    n_lat = design.shape[1]
    out_t = np.zeros((n_prob, n_lat))
    out_dev = np.zeros((n_prob, k_obs + 1))
    out_obj = np.zeros(n_prob)
    out_iter = np.zeros(n_prob, dtype=np.int64)
    out_status = np.zeros(n_prob, dtype=np.int64)
    if n_prob:
        _lad_batch(design, float(ratio), rhs_block, out_t, out_dev, out_obj, out_iter, out_status)
    return out_t, out_dev, out_obj, out_iter, out_status
