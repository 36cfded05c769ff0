"""Robust recovery of latent transforms from pairwise observations.

Model, per Lie-algebra coordinate (rigid) or per voxel and component (svf):
observations r relate to latents t through the incidence matrix, r = W t
plus Laplacian noise, and the zero-sum prior sum(t) = 0 removes the gauge
freedom. Median-style inference minimizes

    ratio * |sum(t)| + sum_k |r_k - (W t)_k|

which is a linear program over the augmented vector (D_0, D_1..D_K, T):
minimize c y subject to the four constraint blocks

    c  = (1 .. 1, 0 .. 0)                          K+1 ones, N zeros
    A1 = (-1, 0 .. 0, -ratio .. -ratio)            row, A1 y <= 0
    A2 = (-1, 0 .. 0, +ratio .. +ratio)            row, A2 y <= 0
    A3 = (-I_K | -W)                               A3 (D_1..D_K, T) <= -r
    A4 = (-I_K | +W)                               A4 (D_1..D_K, T) <= +r

ratio is the prior-to-data noise scale; at 1 the prior rows carry plain
unit coefficients. Solutions come from the in-package simplex kernel with
Bland's rule, so ties between optima resolve the same way on every run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import simplex
from .errors import (
    GridMismatch,
    Infeasible,
    NonFiniteField,
    NumericalFailure,
    Unbounded,
    ValidationFailure,
)
from .geometry import Grid, RigidLog, Svf, grids_close
from .graph import IncidenceMatrix


@dataclass(frozen=True)
class LadProblem:
    """One least-absolute-deviation instance over a shared incidence matrix."""

    incidence: IncidenceMatrix
    observations: np.ndarray
    ratio: float = 1.0

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64).reshape(-1)
        if obs.shape[0] != self.incidence.n_edges:
            raise ValidationFailure(
                f"{obs.shape[0]} observations for {self.incidence.n_edges} edges"
            )
        if not np.isfinite(obs).all():
            raise NonFiniteField("observations contain non-finite values")
        if not self.ratio > 0.0:
            raise ValidationFailure(f"ratio must be positive, got {self.ratio}")
        obs.flags.writeable = False
        object.__setattr__(self, "observations", obs)


@dataclass(frozen=True)
class LadSolution:
    latent: np.ndarray
    deviations: np.ndarray
    objective: float
    iterations: int


@dataclass(frozen=True)
class LpStandardForm:
    """The explicit constraint blocks, mostly for inspection and tests."""

    c: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    a4: np.ndarray
    rhs3: np.ndarray
    rhs4: np.ndarray


def assemble_lp(problem: LadProblem) -> LpStandardForm:
    w = problem.incidence.matrix
    k, n = w.shape
    c = np.concatenate([np.ones(k + 1), np.zeros(n)])
    a1 = np.concatenate([[-1.0], np.zeros(k), -problem.ratio * np.ones(n)])
    a2 = np.concatenate([[-1.0], np.zeros(k), problem.ratio * np.ones(n)])
    a3 = np.hstack([-np.eye(k), -w])
    a4 = np.hstack([-np.eye(k), w])
    return LpStandardForm(c, a1, a2, a3, a4, -problem.observations, problem.observations.copy())


_STATUS_ERRORS = {
    simplex.STATUS_MAXITER: (NumericalFailure, "pivot budget exceeded"),
    simplex.STATUS_UNBOUNDED: (Unbounded, "linear program unbounded"),
    simplex.STATUS_INFEASIBLE: (Infeasible, "linear program infeasible"),
}


def _raise_for_status(status: int, context: str):
    err, msg = _STATUS_ERRORS[int(status)]
    raise err(f"{msg} ({context})")


def solve_lad(problem: LadProblem) -> LadSolution:
    """Solve one instance. The returned objective equals
    ratio * |sum(t)| + sum |r - W t| up to solver arithmetic."""
    t, dev, obj, status, iters = simplex.lad_solve_single(
        problem.incidence.matrix, problem.ratio, problem.observations
    )
    if status != simplex.STATUS_OK:
        _raise_for_status(status, f"K={problem.incidence.n_edges} N={problem.incidence.n_nodes}")
    return LadSolution(t, dev, float(obj), iters)


@dataclass(frozen=True)
class SolveReport:
    n_solves: int
    objective_total: float
    prior_deviation_total: float
    data_deviation_total: float
    iterations_mean: float
    iterations_median: float
    iterations_max: int
    wall_seconds: float
    per_solve_mean_seconds: float

    def as_dict(self) -> dict:
        return {
            "n_solves": self.n_solves,
            "objective_total": self.objective_total,
            "prior_deviation_total": self.prior_deviation_total,
            "data_deviation_total": self.data_deviation_total,
            "iterations_mean": self.iterations_mean,
            "iterations_median": self.iterations_median,
            "iterations_max": self.iterations_max,
        }

    def timing_dict(self) -> dict:
        return {
            "wall_seconds": self.wall_seconds,
            "per_solve_mean_seconds": self.per_solve_mean_seconds,
        }


def _make_report(dev: np.ndarray, obj: np.ndarray, iters: np.ndarray, wall: float) -> SolveReport:
    n = int(obj.shape[0])
    return SolveReport(
        n_solves=n,
        objective_total=float(np.sum(obj)),
        prior_deviation_total=float(np.sum(dev[:, 0])),
        data_deviation_total=float(np.sum(dev[:, 1:])),
        iterations_mean=float(np.mean(iters)) if n else 0.0,
        iterations_median=float(np.median(iters)) if n else 0.0,
        iterations_max=int(np.max(iters)) if n else 0,
        wall_seconds=wall,
        per_solve_mean_seconds=wall / n if n else 0.0,
    )


def set_workers(workers: int) -> int:
    """Cap the numba thread pool; returns the effective count."""
    import numba

    eff = max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(eff)
    return eff


def solve_rigid_graph(
    incidence: IncidenceMatrix, logs: np.ndarray, ratio: float = 1.0
) -> tuple[list[RigidLog], SolveReport]:
    """Latent rigid logs from observed edge logs, one program per coordinate.

    logs is (K, 6), rows ordered like the incidence edges. Returns one
    latent log per node, in node order.
    """
    logs = np.asarray(logs, dtype=np.float64)
    k, n = incidence.matrix.shape
    if logs.shape != (k, 6):
        raise ValidationFailure(f"expected logs of shape ({k}, 6), got {logs.shape}")
    if not np.isfinite(logs).all():
        raise NonFiniteField("observed rigid logs contain non-finite values")
    if k == 0:
        report = _make_report(np.zeros((0, 1)), np.zeros(0), np.zeros(0, dtype=np.int64), 0.0)
        return [RigidLog(np.zeros(3), np.zeros(3)) for _ in range(n)], report
    start = time.perf_counter()
    t, dev, obj, iters, status = simplex.lad_solve_batch(incidence.matrix, ratio, logs.T)
    wall = time.perf_counter() - start
    bad = np.flatnonzero(status)
    if bad.size:
        _raise_for_status(status[bad[0]], f"rigid coordinate {bad[0]}")
    latents = [RigidLog(t[:3, i], t[3:, i]) for i in range(n)]
    return latents, _make_report(dev, obj, iters, wall)


def solve_svf_graph(
    incidence: IncidenceMatrix,
    fields: list[Svf],
    ratio: float = 1.0,
    mask: np.ndarray | None = None,
    workers: int = 1,
) -> tuple[list[Svf], SolveReport]:
    """Latent velocity fields from observed edge fields, voxelwise programs.

    All observation fields must share one grid. Each masked voxel yields
    three independent programs (one per vector component); voxels outside
    the mask keep zero latent velocity. Results do not depend on workers.
    """
    k, n = incidence.matrix.shape
    if len(fields) != k:
        raise ValidationFailure(f"{len(fields)} fields for {k} edges")
    if k == 0:
        raise ValidationFailure("svf solve needs at least one observation edge")
    grid = fields[0].grid
    for f in fields[1:]:
        if not grids_close(f.grid, grid):
            raise GridMismatch("observation fields live on different grids")
    if mask is None:
        mask = np.ones(grid.shape, dtype=bool)
    else:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != grid.shape:
            raise GridMismatch(f"mask shape {mask.shape} does not match grid {grid.shape}")

    stack = np.stack([f.values for f in fields])  # (K, X, Y, Z, 3)
    flat_mask = mask.reshape(-1)
    sel = np.flatnonzero(flat_mask)
    obs = stack.reshape(k, -1, 3)[:, sel, :]  # (K, P, 3)
    rhs = np.ascontiguousarray(obs.transpose(1, 2, 0).reshape(-1, k))  # (P*3, K)

    set_workers(workers)
    start = time.perf_counter()
    t, dev, obj, iters, status = simplex.lad_solve_batch(incidence.matrix, ratio, rhs)
    wall = time.perf_counter() - start

    bad = np.flatnonzero(status)
    if bad.size:
        p = int(bad[0])
        voxel = np.unravel_index(sel[p // 3], grid.shape)
        err, msg = _STATUS_ERRORS[int(status[p])]
        raise err(f"{msg} at voxel {tuple(int(v) for v in voxel)} component {p % 3}")

    out = np.zeros((n,) + grid.shape + (3,))
    flat = out.reshape(n, -1, 3)
    flat[:, sel, :] = t.reshape(-1, 3, n).transpose(2, 0, 1)
    latents = [Svf(grid, flat[i].reshape(grid.shape + (3,))) for i in range(n)]
    return latents, _make_report(dev, obj, iters, wall)
