"""Stationary trajectory fitting, evaluation, prediction and transport.

The subject trajectory is a per-voxel line through the latent velocity
fields against time: an intercept field anchoring the template origin and
a slope field in voxels per year. Evaluating the trajectory exponentiates
the scaled slope; the intercept is stored for inspection but never applied
because the template already sits at the time origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTimes,
    GridMismatch,
    InsufficientTimepoints,
    NumericalFailure,
    ValidationFailure,
)
from .geometry import (
    DisplacementField,
    Grid,
    Svf,
    _index_grid,
    grids_close,
    jacobian_determinant,
    svf_exp,
    trilinear_sample,
)
from .volume_io import Volume


@dataclass(frozen=True)
class TrajectoryModel:
    """Voxelwise linear model of the latent velocity fields over time."""

    intercept: Svf
    slope: Svf
    residual: Volume

    def __post_init__(self):
        if not (
            grids_close(self.intercept.grid, self.slope.grid)
            and grids_close(self.slope.grid, self.residual.grid)
        ):
            raise GridMismatch("trajectory model parts live on different grids")
        if self.residual.data.min() < 0:
            raise ValidationFailure("trajectory residual map has negative entries")

    @property
    def grid(self) -> Grid:
        return self.slope.grid


def fit_trajectory(latent_svfs: list[Svf], times: list[float], method: str = "ols") -> TrajectoryModel:
    """Per-voxel per-coordinate line through (time, velocity) pairs.

    The default criterion is ordinary least squares in closed form. The
    "lad" method minimizes absolute deviations instead, reusing the graph
    solver's simplex kernel one voxel at a time, for series where single
    timepoints may be badly registered.
    """
    n = len(latent_svfs)
    if n < 2 or len(times) != n:
        raise InsufficientTimepoints(f"need at least 2 timepoints with matching times, got {n}")
    t = np.asarray(times, dtype=np.float64)
    if not np.isfinite(t).all():
        raise DegenerateTimes("times contain non-finite values")
    if np.ptp(t) == 0.0:
        raise DegenerateTimes("all acquisition times are equal")
    grid = latent_svfs[0].grid
    for field in latent_svfs[1:]:
        if not grids_close(field.grid, grid):
            raise GridMismatch("latent velocity fields live on different grids")
    if method not in ("ols", "lad"):
        raise ValidationFailure(f"unknown fit method {method!r}")

    stack = np.stack([f.values for f in latent_svfs])
    if method == "ols":
        tc = t - t.mean()
        slope = np.tensordot(tc, stack, axes=(0, 0)) / (tc**2).sum()
        intercept = stack.mean(axis=0) - slope * t.mean()
    else:
        from .simplex import STATUS_OK, lad_solve_batch

        design = np.column_stack([np.ones_like(t), t])
        rhs = stack.reshape(n, -1).T.copy()
        coef, _, _, _, statuses = lad_solve_batch(design, 0.0, rhs)
        if not (statuses == STATUS_OK).all():
            bad = int(np.argmax(statuses != STATUS_OK))
            raise NumericalFailure(f"absolute-deviation fit failed at flat index {bad}")
        intercept = coef[:, 0].reshape(stack.shape[1:])
        slope = coef[:, 1].reshape(stack.shape[1:])

    fit = intercept[None] + t[:, None, None, None, None] * slope[None]
    residual = np.abs(stack - fit).mean(axis=(0, -1))
    return TrajectoryModel(Svf(grid, intercept), Svf(grid, slope), Volume(grid, residual))


def evaluate_trajectory(model: TrajectoryModel, t: float, direction: int = 1) -> DisplacementField:
    """Deformation at time t: the exponential of the slope scaled by t."""
    if not np.isfinite(t):
        raise ValidationFailure("evaluation time must be finite")
    return svf_exp(Svf(model.grid, model.slope.values * float(t)), direction=direction)


def predict_image(template: Volume, model: TrajectoryModel, t: float) -> Volume:
    """Template intensity followed along the trajectory to time t, one interpolation."""
    intensity = getattr(template, "intensity", template)
    if not grids_close(intensity.grid, model.grid):
        raise GridMismatch("template and trajectory model live on different grids")
    disp = evaluate_trajectory(model, t, direction=-1)
    data = trilinear_sample(intensity.data, _index_grid(model.grid.shape) + disp.values, mode="fill", fill=0.0)
    return Volume(model.grid, data)


def jacobian_map(model: TrajectoryModel, t: float) -> Volume:
    """Jacobian determinant of the trajectory deformation at time t.

    Values above 1 mark expansion relative to the template, below 1
    contraction, which makes the map directly usable for tensor-based
    morphometry at any follow-up time.
    """
    disp = evaluate_trajectory(model, t, direction=1)
    return Volume(model.grid, jacobian_determinant(disp))


def transport_svf(field: Svf, warp: Svf, population_grid: Grid | None = None) -> Svf:
    """Carry a subject velocity field into population space by pushforward.

    `warp` holds the subject-template to population-template map in the log
    domain, stored on the population grid; its negated exponential sends
    population points to the matching subject points. Each transported
    vector is the sampled subject vector bent by the Jacobian of that
    point correspondence, so affine warps act exactly: a pure translation
    only resamples, a uniform scaling also rescales the vectors.
    """
    if population_grid is None:
        population_grid = warp.grid
    if not grids_close(warp.grid, population_grid):
        raise GridMismatch("transport warp must be stored on the population grid")
    pull = svf_exp(warp, direction=-1).values
    vox_pop = _index_grid(population_grid.shape) + pull
    world = population_grid.voxel_to_world(vox_pop)
    sampled = trilinear_sample(field.values, field.grid.world_to_voxel(world), mode="clamp")

    jac = np.empty(population_grid.shape + (3, 3))
    for c in range(3):
        grads = np.gradient(pull[..., c])
        for ax in range(3):
            jac[..., c, ax] = grads[ax]
    jac += np.eye(3)
    dets = np.linalg.det(jac)
    if dets.min() <= 1e-9:
        raise NumericalFailure(
            f"transport warp folds space (min Jacobian determinant {dets.min():.3g})"
        )

    frame = np.linalg.solve(population_grid.affine[:3, :3], field.grid.affine[:3, :3])
    rotated = np.einsum("ij,...j->...i", frame, sampled)
    out = np.linalg.solve(jac, rotated[..., None])[..., 0]
    return Svf(population_grid, out)
