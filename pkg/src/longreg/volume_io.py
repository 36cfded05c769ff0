"""Typed volumes and file I/O.

Scalar images, probabilistic masks and integer label maps share a Grid.
Files are single-file NIfTI-1 (.nii or .nii.gz); the label table rides in
a JSON header extension so a write/read round trip is lossless. Vector
fields are 4D volumes with the vector axis last and a one-word intent tag
("svf" or "disp") for the field kind. Rigid transforms are stored as
plain-text 4-row world-to-world matrices.

Boundary policy for resampling: displacement fields are sampled with edge
clamping, image intensities outside the source field of view read as a
caller-selected fill value (default 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nifti
from .errors import (
    GridMismatch,
    IoError,
    LabelMismatch,
    NonFiniteIntensities,
    ParseError,
    UnknownLabel,
    UnsupportedDimensionality,
)
from .geometry import (
    DisplacementField,
    Grid,
    RigidTransform,
    Svf,
    _index_grid,
    trilinear_sample,
)

LABEL_TABLE_ECODE = 6  # NIfTI-1 "comment" extension, JSON payload


@dataclass(frozen=True)
class Volume:
    """Scalar intensity image on a grid."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.shape != self.grid.shape:
            raise GridMismatch(f"data shape {arr.shape} does not match grid {self.grid.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteIntensities("volume contains non-finite intensities")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class MaskVolume:
    """Per-voxel probability of belonging to the region of interest."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.shape != self.grid.shape:
            raise GridMismatch(f"mask shape {arr.shape} does not match grid {self.grid.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteIntensities("mask contains non-finite values")
        if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
            raise NonFiniteIntensities(
                f"mask values outside [0, 1]: range [{arr.min():g}, {arr.max():g}]"
            )
        arr = np.clip(arr, 0.0, 1.0)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label map with a label table (id to name)."""

    grid: Grid
    data: np.ndarray
    table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            rounded = np.rint(arr)
            if not np.allclose(arr, rounded, atol=1e-9):
                raise LabelMismatch("label data is not integer valued")
            arr = rounded
        arr = arr.astype(np.int32)
        if arr.shape != self.grid.shape:
            raise GridMismatch(f"labels shape {arr.shape} does not match grid {self.grid.shape}")
        if arr.min() < 0:
            raise UnknownLabel(f"negative label id {arr.min()} present")
        present = [int(v) for v in np.unique(arr)]
        table = {int(k): str(v) for k, v in (self.table or {}).items()}
        for lab in present:
            table.setdefault(lab, f"label-{lab}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "table", table)

    def ids(self) -> list[int]:
        return sorted(self.table)


def one_hot(labels: LabelVolume, selected: list[int] | None = None) -> list[Volume]:
    """Indicator volume per selected label, in the given order."""
    ids = labels.ids() if selected is None else list(selected)
    for lab in ids:
        if lab not in labels.table:
            raise UnknownLabel(f"label id {lab} not in table {sorted(labels.table)}")
    return [Volume(labels.grid, (labels.data == lab).astype(np.float64)) for lab in ids]


def _label_extension(vol: LabelVolume) -> tuple[int, bytes]:
    payload = json.dumps(
        {"kind": "labels", "table": [[k, vol.table[k]] for k in sorted(vol.table)]},
        sort_keys=True,
    ).encode()
    return (LABEL_TABLE_ECODE, payload)


def _decode_extension(extensions) -> dict:
    for ecode, payload in extensions:
        if ecode != LABEL_TABLE_ECODE:
            continue
        try:
            meta = json.loads(payload.rstrip(b"\x00").decode())
        except (ValueError, UnicodeDecodeError):
            continue
        if isinstance(meta, dict) and "kind" in meta:
            return meta
    return {}


def write_volume(path: str, vol: Volume | MaskVolume | LabelVolume) -> None:
    if isinstance(vol, LabelVolume):
        nifti.write_nifti(path, vol.data, vol.grid.affine, extensions=[_label_extension(vol)])
    elif isinstance(vol, MaskVolume):
        ext = (LABEL_TABLE_ECODE, json.dumps({"kind": "mask"}).encode())
        nifti.write_nifti(path, vol.data, vol.grid.affine, extensions=[ext])
    elif isinstance(vol, Volume):
        nifti.write_nifti(path, vol.data, vol.grid.affine)
    else:
        raise IoError(f"cannot write object of type {type(vol).__name__} as a volume")


def read_volume(path: str, kind: str = "auto") -> Volume | MaskVolume | LabelVolume:
    img = nifti.read_nifti(path)
    if img.data.ndim != 3:
        raise UnsupportedDimensionality(
            f"{path}: 4D vector volume, use read_field for transform payloads"
        )
    grid = Grid(img.data.shape, img.affine)
    meta = _decode_extension(img.extensions)
    if kind == "auto":
        if meta.get("kind") == "labels":
            kind = "labels"
        elif meta.get("kind") == "mask":
            kind = "mask"
        elif np.issubdtype(img.data.dtype, np.integer):
            kind = "labels"
        else:
            kind = "image"
    if kind == "labels":
        table = {int(k): str(v) for k, v in meta.get("table", [])}
        return LabelVolume(grid, img.data, table)
    if kind == "mask":
        return MaskVolume(grid, img.data.astype(np.float64))
    if kind == "image":
        return Volume(grid, img.data.astype(np.float64))
    raise IoError(f"unknown volume kind {kind!r}")


def write_field(path: str, fld: Svf | DisplacementField) -> None:
    if isinstance(fld, Svf):
        tag = "svf"
    elif isinstance(fld, DisplacementField):
        tag = "disp"
    else:
        raise IoError(f"cannot write object of type {type(fld).__name__} as a field")
    nifti.write_nifti(path, fld.values, fld.grid.affine, intent_name=tag)


def read_field(path: str) -> Svf | DisplacementField:
    img = nifti.read_nifti(path)
    if img.data.ndim != 4:
        raise UnsupportedDimensionality(f"{path}: expected a 4D vector volume")
    grid = Grid(img.data.shape[:3], img.affine)
    values = img.data.astype(np.float64)
    if img.intent_name == "svf":
        return Svf(grid, values)
    if img.intent_name == "disp":
        return DisplacementField(grid, values)
    raise ParseError(
        f"{path}: vector volume has field-kind tag {img.intent_name!r}, expected 'svf' or 'disp'"
    )


def write_rigid(path: str, transform: RigidTransform) -> None:
    try:
        np.savetxt(path, transform.matrix(), fmt="%.17g")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_rigid(path: str) -> RigidTransform:
    try:
        m = np.loadtxt(path)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{path}: not a plain-text matrix ({exc})") from exc
    if m.shape != (4, 4):
        raise ParseError(f"{path}: expected a 4x4 matrix, got shape {m.shape}")
    return RigidTransform.from_matrix(m)


def write_grid(path: str, grid: Grid) -> None:
    doc = {"shape": list(grid.shape), "affine": grid.affine.tolist()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_grid(path: str) -> Grid:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    return Grid(tuple(doc["shape"]), np.array(doc["affine"]))


def chain_points(
    dst_grid: Grid, transforms: list[RigidTransform | DisplacementField]
) -> np.ndarray:
    """World coordinates of dst voxels pushed through the transform chain.

    Transforms apply in list order; each maps world points to world points.
    Displacement fields must live on dst_grid and act in its voxel frame.
    """
    pts = dst_grid.voxel_to_world(_index_grid(dst_grid.shape))
    for tr in transforms:
        if isinstance(tr, RigidTransform):
            pts = tr.apply(pts)
        elif isinstance(tr, (DisplacementField, Svf)):
            if isinstance(tr, Svf):
                raise GridMismatch("resample chains take displacement fields, integrate the svf first")
            if not (tr.grid.shape == dst_grid.shape and np.allclose(tr.grid.affine, dst_grid.affine, atol=1e-4)):
                raise GridMismatch("displacement field grid differs from dst_grid")
            vox = tr.grid.world_to_voxel(pts)
            vox = vox + trilinear_sample(tr.values, vox, mode="clamp")
            pts = tr.grid.voxel_to_world(vox)
        else:
            raise GridMismatch(f"unsupported chain element of type {type(tr).__name__}")
    return pts


def resample(
    src: Volume | MaskVolume | LabelVolume,
    dst_grid: Grid,
    transforms: list[RigidTransform | DisplacementField] | None = None,
    fill: float = 0.0,
) -> Volume | MaskVolume | LabelVolume:
    """Pull src onto dst_grid through a chain mapping dst world to src world.

    The whole chain is evaluated per destination voxel and the source is
    interpolated exactly once. Intensities and masks interpolate trilinearly
    with the fill value outside the source field of view. Label maps go
    through one-hot encoding, trilinear interpolation per channel and a
    voxelwise argmax, ties resolved toward the lowest label id; voxels
    outside the source field of view take the background label 0 when the
    table has one.
    """
    pts = chain_points(dst_grid, list(transforms or []))
    vox = src.grid.world_to_voxel(pts)
    if isinstance(src, LabelVolume):
        ids = src.ids()
        channels = np.stack([(src.data == lab) for lab in ids], axis=-1).astype(np.float64)
        warped = trilinear_sample(channels, vox, mode="fill", fill=0.0)
        if 0 in ids:
            bg = ids.index(0)
            outside = np.all(
                warped <= 0.0, axis=-1
            )  # no source support at all, keep background
            warped[..., bg] = np.where(outside, 1.0, warped[..., bg])
        picked = np.argmax(warped, axis=-1)
        out = np.asarray(ids, dtype=np.int32)[picked]
        return LabelVolume(dst_grid, out, dict(src.table))
    sampled = trilinear_sample(src.data, vox, mode="fill", fill=fill)
    if isinstance(src, MaskVolume):
        return MaskVolume(dst_grid, np.clip(sampled, 0.0, 1.0))
    return Volume(dst_grid, sampled)
