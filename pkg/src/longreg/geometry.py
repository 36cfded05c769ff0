"""Rigid and diffeomorphic transform primitives.

Rigid transforms live in SE(3). Their logs are 6-vectors (q, d) where q is
the rotation axis scaled by the angle (radians) and d is the translation
generator (mm). Nonlinear deformations are stationary velocity fields (SVF)
sampled on a regular grid with the vector axis last, in voxel units of that
grid; integrating an SVF for unit time by scaling and squaring yields a
dense displacement field on the same grid.

Numerical policy:
  ANGLE_EPSILON: below this angle the closed-form coefficients switch to
    second-order Taylor expansions.
  PI_MARGIN: rotations within this margin of pi are rejected, the matrix
    log has no stable axis there.
  MAX_STEP_VOXELS / MIN_SQUARINGS: scaling-and-squaring halves the field
    until its largest vector is under MAX_STEP_VOXELS, with at least
    MIN_SQUARINGS doublings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    GridMismatch,
    NonFiniteField,
    NotARigidTransform,
    RotationNearPi,
)

ANGLE_EPSILON = 1e-5
PI_MARGIN = 1e-6
ORTHONORMALITY_TOL = 1e-9
MAX_STEP_VOXELS = 0.5
MIN_SQUARINGS = 4


@dataclass(frozen=True)
class Grid:
    """Regular sampling lattice: integer shape plus a 4x4 world affine.

    The affine maps homogeneous voxel indices (i, j, k, 1) to world
    coordinates in mm, RAS orientation. Spacing is derived from the affine
    column norms.
    """

    shape: tuple[int, int, int]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        aff = np.asarray(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise GridMismatch(f"affine must be 4x4, got {aff.shape}")
        if len(self.shape) != 3 or any(n < 2 for n in self.shape):
            raise GridMismatch(f"grid shape must be 3D with >=2 voxels per axis, got {self.shape}")
        if abs(np.linalg.det(aff[:3, :3])) < 1e-12:
            raise GridMismatch("affine voxel-to-world block is singular")
        aff = aff.copy()
        aff[3] = (0.0, 0.0, 0.0, 1.0)
        aff.flags.writeable = False
        object.__setattr__(self, "affine", aff)

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def voxel_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        inv = np.linalg.inv(self.affine)
        return pts @ inv[:3, :3].T + inv[:3, 3]

    def corner_voxels(self) -> np.ndarray:
        """The 8 corner voxel indices of the field of view, as floats."""
        nx, ny, nz = (n - 1 for n in self.shape)
        return np.array(
            [(x, y, z) for x in (0, nx) for y in (0, ny) for z in (0, nz)],
            dtype=np.float64,
        )


def grids_close(a: Grid, b: Grid, atol: float = 1e-4) -> bool:
    return a.shape == b.shape and np.allclose(a.affine, b.affine, atol=atol, rtol=0.0)


def _require_same_grid(a: Grid, b: Grid, what: str):
    if not grids_close(a, b):
        raise GridMismatch(f"{what}: grids differ (shape {a.shape} vs {b.shape})")


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: world point x maps to rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise NotARigidTransform(f"rotation block not orthonormal (max error {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise NotARigidTransform(f"rotation block has det {det:.12f}, expected +1")
        rot.flags.writeable = False
        tra.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise NotARigidTransform(f"expected 4x4 matrix, got {m.shape}")
        if not np.allclose(m[3], (0, 0, 0, 1), atol=1e-9):
            raise NotARigidTransform(f"last row must be (0,0,0,1), got {m[3]}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self after other: x maps to self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class RigidLog:
    """Lie-algebra coordinates of a rigid transform: (q, d), both 3-vectors."""

    q: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(3)
        d = np.asarray(self.d, dtype=np.float64).reshape(3)
        if not (np.isfinite(q).all() and np.isfinite(d).all()):
            raise NonFiniteField("rigid log has non-finite components")
        q.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "d", d)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "RigidLog":
        v = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.d])

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.q))


def skew(q: np.ndarray) -> np.ndarray:
    qx, qy, qz = np.asarray(q, dtype=np.float64).reshape(3)
    return np.array([[0.0, -qz, qy], [qz, 0.0, -qx], [-qy, qx, 0.0]])


def _rot_coefficients(phi: float) -> tuple[float, float, float]:
    """(sin phi / phi, (1 - cos phi) / phi^2, (phi - sin phi) / phi^3)."""
    if phi < ANGLE_EPSILON:
        p2 = phi * phi
        return 1.0 - p2 / 6.0, 0.5 - p2 / 24.0, 1.0 / 6.0 - p2 / 120.0
    return (
        np.sin(phi) / phi,
        (1.0 - np.cos(phi)) / (phi * phi),
        (phi - np.sin(phi)) / (phi * phi * phi),
    )


def se3_exp(log: RigidLog) -> RigidTransform:
    """Closed-form exponential of a rigid log.

    Rodrigues for the rotation block and the standard left-Jacobian series
    for the translation:

        U = I + A Q + B Q^2
        t = (I + B Q + C Q^2) d

    with Q = skew(q), A = sin(phi)/phi, B = (1-cos(phi))/phi^2 and
    C = (phi-sin(phi))/phi^3, switching to Taylor forms near zero angle.
    """
    q = log.q
    phi = float(np.linalg.norm(q))
    big_q = skew(q)
    big_q2 = big_q @ big_q
    a, b, c = _rot_coefficients(phi)
    rot = np.eye(3) + a * big_q + b * big_q2
    vmat = np.eye(3) + b * big_q + c * big_q2
    return RigidTransform(rot, vmat @ log.d)


def se3_log(transform: RigidTransform) -> RigidLog:
    """Closed-form logarithm of a rigid transform.

    The angle comes from the trace, the axis from the antisymmetric part:

        cos phi = (tr(U) - 1) / 2
        q = phi / (2 sin phi) * (U32-U23, U13-U31, U21-U12)

    and the translation generator inverts the left Jacobian:

        d = (I - Q/2 + ((1 - (phi/2) cot(phi/2)) / phi^2) Q^2) t

    Angles within PI_MARGIN of pi are rejected: the antisymmetric part
    vanishes there and no stable axis can be extracted.
    """
    rot = transform.rotation
    cos_phi = float(np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0))
    phi = float(np.arccos(cos_phi))
    if phi >= np.pi - PI_MARGIN:
        raise RotationNearPi(f"rotation angle {phi:.9f} is within {PI_MARGIN:g} of pi")
    axis_part = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    if phi < ANGLE_EPSILON:
        gain = 0.5 + phi * phi / 12.0
        c2 = 1.0 / 12.0 + phi * phi / 720.0
    else:
        gain = phi / (2.0 * np.sin(phi))
        half = 0.5 * phi
        c2 = (1.0 - half * np.cos(half) / np.sin(half)) / (phi * phi)
    q = gain * axis_part
    big_q = skew(q)
    vinv = np.eye(3) - 0.5 * big_q + c2 * (big_q @ big_q)
    return RigidLog(q, vinv @ transform.translation)


def log_compose(a: RigidLog, b: RigidLog) -> RigidLog:
    """Log-domain composition, first order in the commutator: a + b.

    Exact when the generators commute; otherwise the gap against
    se3_log(se3_exp(a) @ se3_exp(b)) is of the order of the Lie bracket
    and should be measured, not assumed away.
    """
    return RigidLog(a.q + b.q, a.d + b.d)


def _check_field(values: np.ndarray, grid: Grid, what: str) -> np.ndarray:
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape != grid.shape + (3,):
        raise GridMismatch(
            f"{what}: values shape {vals.shape} does not match grid {grid.shape} + (3,)"
        )
    if not np.isfinite(vals).all():
        raise NonFiniteField(f"{what} contains non-finite components")
    return vals


@dataclass(frozen=True)
class Svf:
    """Stationary velocity field on a grid, vector axis last, voxel units."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = _check_field(self.values, self.grid, "svf")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def max_norm(self) -> float:
        return float(np.sqrt((self.values**2).sum(axis=-1)).max())


@dataclass(frozen=True)
class DisplacementField:
    """Dense displacement field on a grid, vector axis last, voxel units."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = _check_field(self.values, self.grid, "displacement field")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def max_norm(self) -> float:
        return float(np.sqrt((self.values**2).sum(axis=-1)).max())


@lru_cache(maxsize=8)
def _index_grid(shape: tuple[int, int, int]) -> np.ndarray:
    idx = np.stack(
        np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"),
        axis=-1,
    )
    idx.flags.writeable = False
    return idx


def trilinear_sample(
    values: np.ndarray,
    points: np.ndarray,
    mode: str = "clamp",
    fill: float = 0.0,
) -> np.ndarray:
    """Trilinear interpolation of a 3D (or 3D + channel) array.

    points holds voxel coordinates with the coordinate axis last. Mode
    'clamp' clips sample positions to the volume; mode 'fill' returns the
    fill value for any point outside [0, n-1] on some axis.
    """
    vals = np.asarray(values)
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise GridMismatch(f"points must have a trailing axis of length 3, got {pts.shape}")
    if vals.ndim not in (3, 4):
        raise GridMismatch(f"values must be 3D or 3D+channels, got shape {vals.shape}")
    if mode not in ("clamp", "fill"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    dims = np.array(vals.shape[:3], dtype=np.float64)

    if mode == "fill":
        inside = np.all((pts >= 0.0) & (pts <= dims - 1.0), axis=-1)
    clipped = np.clip(pts, 0.0, dims - 1.0)
    base = np.minimum(np.floor(clipped), dims - 2.0).astype(np.int64)
    base = np.maximum(base, 0)
    frac = clipped - base

    ix, iy, iz = base[..., 0], base[..., 1], base[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    if vals.ndim == 4:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]

    out = (
        vals[ix, iy, iz] * (1 - fx) * (1 - fy) * (1 - fz)
        + vals[ix + 1, iy, iz] * fx * (1 - fy) * (1 - fz)
        + vals[ix, iy + 1, iz] * (1 - fx) * fy * (1 - fz)
        + vals[ix, iy, iz + 1] * (1 - fx) * (1 - fy) * fz
        + vals[ix + 1, iy + 1, iz] * fx * fy * (1 - fz)
        + vals[ix + 1, iy, iz + 1] * fx * (1 - fy) * fz
        + vals[ix, iy + 1, iz + 1] * (1 - fx) * fy * fz
        + vals[ix + 1, iy + 1, iz + 1] * fx * fy * fz
    )
    if mode == "fill":
        if vals.ndim == 4:
            out = np.where(inside[..., None], out, fill)
        else:
            out = np.where(inside, out, fill)
    return out


def squaring_steps(max_norm: float) -> int:
    """Smallest step count with max_norm / 2**s < MAX_STEP_VOXELS, at least MIN_SQUARINGS."""
    s = MIN_SQUARINGS
    while max_norm / (2.0**s) >= MAX_STEP_VOXELS:
        s += 1
    return s


def svf_exp(svf: Svf, direction: int = 1) -> DisplacementField:
    """Integrate a stationary velocity field by scaling and squaring.

    The field (negated for direction -1) is divided by 2**s so its largest
    vector is below half a voxel, then self-composed s times. Sampling is
    trilinear with edge clamping. A zero field returns an exactly zero
    displacement.
    """
    if direction not in (1, -1):
        raise ValueError(f"direction must be +1 or -1, got {direction}")
    vel = svf.values * float(direction)
    mx = float(np.sqrt((vel**2).sum(axis=-1)).max())
    s = squaring_steps(mx)
    u = vel / (2.0**s)
    base = _index_grid(svf.grid.shape)
    for _ in range(s):
        u = u + trilinear_sample(u, base + u, mode="clamp")
    return DisplacementField(svf.grid, u)


def compose_displacements(
    outer: DisplacementField, inner: DisplacementField
) -> DisplacementField:
    """Displacement of the map outer(inner(x)): inner(x) + outer sampled at x + inner(x)."""
    _require_same_grid(outer.grid, inner.grid, "compose_displacements")
    base = _index_grid(inner.grid.shape)
    vals = inner.values + trilinear_sample(outer.values, base + inner.values, mode="clamp")
    return DisplacementField(inner.grid, vals)


def jacobian_determinant(disp: DisplacementField) -> np.ndarray:
    """Voxelwise Jacobian determinant of x + u(x).

    Derivatives use central differences in the interior and one-sided
    differences at the boundary. The determinant is identical in voxel and
    world frames (conjugation by the affine block does not change it), so
    it is computed in voxel units.
    """
    u = disp.values
    jac = np.empty(u.shape[:3] + (3, 3))
    for i in range(3):
        for j in range(3):
            jac[..., i, j] = np.gradient(u[..., i], axis=j)
        jac[..., i, i] += 1.0
    a = jac
    det = (
        a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
        - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
        + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
    )
    return det
