"""Pairwise registration: rigid from label centroids, nonlinear as an SVF.

Conventions. A registration between a reference and a target estimates the
point map carrying reference anatomy onto target anatomy. For the rigid
fit that is the transform minimizing squared centroid distance; for the
nonlinear fit it is a stationary velocity field whose exponential maps
reference grid positions to the matching target positions, so warping the
target image by that field reproduces the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    DegenerateConfiguration,
    EmptyLabel,
    GridMismatch,
    LabelMismatch,
    NonFiniteIntensities,
)
from .geometry import (
    Grid,
    RigidLog,
    RigidTransform,
    Svf,
    _index_grid,
    grids_close,
    se3_log,
    trilinear_sample,
)
from .volume_io import LabelVolume, Volume


@dataclass(frozen=True)
class CentroidSet:
    """World-space centroid per label, rows aligned with the label ids."""

    labels: tuple[int, ...]
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(len(self.labels), 3)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))


def centroids(labels: LabelVolume, selected: list[int] | None = None) -> CentroidSet:
    """Mean world coordinate of each selected label (default: all non-background)."""
    if selected is None:
        selected = [lab for lab in labels.ids() if lab != 0]
    pts = []
    for lab in selected:
        idx = np.argwhere(labels.data == lab)
        if idx.shape[0] == 0:
            raise EmptyLabel(f"label {lab} has no voxels")
        pts.append(labels.grid.voxel_to_world(idx.astype(np.float64)).mean(axis=0))
    return CentroidSet(tuple(selected), np.array(pts))


def _check_spread(pts: np.ndarray, name: str):
    if pts.shape[0] < 3:
        raise DegenerateConfiguration(f"{name}: need at least 3 centroids, got {pts.shape[0]}")
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-8 * max(s[0], 1.0):
        raise DegenerateConfiguration(f"{name}: centroids are collinear")


def procrustes_rigid(ref: CentroidSet, tgt: CentroidSet) -> tuple[RigidTransform, RigidLog]:
    """Least-squares rigid fit mapping reference centroids onto target centroids.

    Centroids pair by label id. The rotation comes from the SVD of the
    cross-covariance of the centered sets, with the sign of the smallest
    singular direction flipped if needed so the determinant is +1, then
    the translation aligns the centroid means.
    """
    if set(ref.labels) != set(tgt.labels):
        raise LabelMismatch(
            f"centroid label sets differ: {sorted(ref.labels)} vs {sorted(tgt.labels)}"
        )
    order = {lab: i for i, lab in enumerate(tgt.labels)}
    tgt_pts = tgt.points[[order[lab] for lab in ref.labels]]
    ref_pts = ref.points
    _check_spread(ref_pts, "reference")
    _check_spread(tgt_pts, "target")

    ref_mean = ref_pts.mean(axis=0)
    tgt_mean = tgt_pts.mean(axis=0)
    h = (ref_pts - ref_mean).T @ (tgt_pts - tgt_mean)
    left, _, right_t = np.linalg.svd(h)
    d = np.sign(np.linalg.det(right_t.T @ left.T))
    rot = right_t.T @ np.diag([1.0, 1.0, d]) @ left.T
    transform = RigidTransform(rot, tgt_mean - rot @ ref_mean)
    return transform, se3_log(transform)


def symmetrize_svf(forward: Svf, backward: Svf) -> Svf:
    """Average the forward field with the negated backward field."""
    if not grids_close(forward.grid, backward.grid):
        raise GridMismatch("forward and backward fields live on different grids")
    return Svf(forward.grid, 0.5 * forward.values - 0.5 * backward.values)


@dataclass(frozen=True)
class RegParams:
    levels: int = 3
    iterations: int = 100
    update_sigma: float = 2.0
    field_sigma: float = 1.0
    step: float = 1.0
    patience: int = 12


def _downsample(arr: np.ndarray) -> np.ndarray:
    return gaussian_filter(arr, sigma=1.0, mode="nearest")[::2, ::2, ::2]


def _smooth_field(field: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return field
    out = np.empty_like(field)
    for c in range(3):
        out[..., c] = gaussian_filter(field[..., c], sigma=sigma, mode="nearest")
    return out


def _integrate(vel: np.ndarray, base: np.ndarray, steps: int) -> np.ndarray:
    u = vel / (2.0**steps)
    for _ in range(steps):
        u = u + trilinear_sample(u, base + u, mode="clamp")
    return u


def _warp_ssd(tgt: np.ndarray, ref: np.ndarray, base: np.ndarray, u: np.ndarray):
    warped = trilinear_sample(tgt, base + u, mode="fill", fill=0.0)
    residual = warped - ref
    return warped, residual, float((residual**2).sum())


def register_nonlinear_ssd(ref: Volume, tgt: Volume, params: RegParams | None = None) -> Svf:
    """SSD gradient flow in the log domain with a multiresolution pyramid.

    Each iteration warps the target by the integrated field, forms the
    normalized intensity force, smooths the update, adds it to the velocity
    and smooths the velocity again. The best field seen per level carries
    over. The returned field never increases the full-resolution SSD; if
    the flow diverged the zero field comes back instead.
    """
    params = params or RegParams()
    if not grids_close(ref.grid, tgt.grid):
        raise GridMismatch("nonlinear registration needs both images on one grid")
    if not (np.isfinite(ref.data).all() and np.isfinite(tgt.data).all()):
        raise NonFiniteIntensities("registration inputs contain non-finite intensities")

    pyramid = [(ref.data, tgt.data, ref.grid.shape)]
    for _ in range(params.levels - 1):
        rprev, tprev, _ = pyramid[-1]
        if min(rprev.shape) < 12:
            break
        rdown = _downsample(rprev)
        pyramid.append((rdown, _downsample(tprev), rdown.shape))

    vel = np.zeros(pyramid[-1][2] + (3,))
    for level in range(len(pyramid) - 1, -1, -1):
        ref_l, tgt_l, shape_l = pyramid[level]
        if vel.shape[:3] != shape_l:
            # coarse voxel i sits at fine voxel 2i, and velocities double
            # in voxel units when the spacing halves
            vel = 2.0 * trilinear_sample(vel, 0.5 * _index_grid(shape_l), mode="clamp")
        base = _index_grid(shape_l)
        steps = 4
        _, _, best_ssd = _warp_ssd(tgt_l, ref_l, base, _integrate(vel, base, steps))
        best_vel = vel.copy()
        stall = 0
        for _ in range(params.iterations):
            u = _integrate(vel, base, steps)
            warped, residual, ssd = _warp_ssd(tgt_l, ref_l, base, u)
            if ssd < best_ssd - 1e-12 * max(best_ssd, 1.0):
                best_ssd = ssd
                best_vel = vel.copy()
                stall = 0
            else:
                stall += 1
                if stall > params.patience:
                    break
            grad = np.stack(np.gradient(warped), axis=-1)
            gnorm2 = (grad**2).sum(axis=-1)
            denom = gnorm2 + residual**2 + 1e-12
            force = -(residual / denom)[..., None] * grad
            force = _smooth_field(force, params.update_sigma)
            vel = vel + params.step * force
            vel = _smooth_field(vel, params.field_sigma)
        vel = best_vel

    base = _index_grid(ref.grid.shape)
    _, _, final_ssd = _warp_ssd(tgt.data, ref.data, base, _integrate(vel, base, 4))
    _, _, zero_ssd = _warp_ssd(tgt.data, ref.data, base, np.zeros_like(vel))
    if final_ssd > zero_ssd:
        vel = np.zeros_like(vel)
    return Svf(ref.grid, vel)
