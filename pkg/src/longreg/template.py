"""Subject grid construction and template fusion.

The subject space is an axis-aligned 1 mm grid covering every timepoint's
field of view once the latent rigids are undone. Each timepoint is then
resampled onto that grid through its full latent chain (nonlinear part
first, rigid part second, both template-to-timepoint point maps) and the
aligned stack is fused: median intensity, mean mask, and the most voted
label after averaging deformed one-hot encodings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, InsufficientTimepoints, ValidationFailure
from .geometry import DisplacementField, Grid, RigidTransform, Svf, grids_close, svf_exp, trilinear_sample
from .volume_io import LabelVolume, MaskVolume, Volume, chain_points, resample


def define_subject_grid(
    grids: list[Grid],
    latent_rigids: list[RigidTransform],
    pad_mm: float = 5.0,
    spacing_mm: float = 1.0,
) -> Grid:
    """Bounding grid of all timepoint corners pulled back through the latent rigids.

    Corners go timepoint to template, so each latent rigid (a template to
    timepoint map) is inverted before application. The cuboid is padded on
    every side and gridded isotropically, with the translation chosen so
    the grid is centred on the cuboid centre.
    """
    if len(grids) == 0:
        raise InsufficientTimepoints("need at least one timepoint to define a grid")
    if len(grids) != len(latent_rigids):
        raise ValidationFailure(f"{len(grids)} grids but {len(latent_rigids)} latent rigids")
    if not (pad_mm >= 0 and spacing_mm > 0):
        raise ValidationFailure("padding must be nonnegative and spacing positive")
    corners = []
    for grid, rigid in zip(grids, latent_rigids):
        world = grid.voxel_to_world(grid.corner_voxels())
        corners.append(rigid.inverse().apply(world))
    pts = np.concatenate(corners, axis=0)
    lo = pts.min(axis=0) - pad_mm
    hi = pts.max(axis=0) + pad_mm
    shape = tuple(max(2, int(math.ceil((hi[a] - lo[a]) / spacing_mm)) + 1) for a in range(3))
    affine = np.eye(4)
    affine[0, 0] = affine[1, 1] = affine[2, 2] = spacing_mm
    centre = (lo + hi) / 2.0
    affine[:3, 3] = centre - spacing_mm * (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    return Grid(shape, affine)


@dataclass(frozen=True)
class SubjectTemplate:
    intensity: Volume
    mask: MaskVolume | None = None
    labels: LabelVolume | None = None


def latent_chain(grid: Grid, rigid: RigidTransform, svf: Svf | None):
    """Resampling chain for one timepoint: nonlinear latent on the subject grid, then rigid."""
    chain: list = []
    if svf is not None:
        if not grids_close(svf.grid, grid):
            raise GridMismatch("latent velocity field does not live on the subject grid")
        chain.append(svf_exp(svf, direction=1))
    chain.append(rigid)
    return chain


def build_template(
    grid: Grid,
    images: list[Volume],
    latent_rigids: list[RigidTransform],
    latent_svfs: list[Svf | None] | None = None,
    masks: list[MaskVolume | None] | None = None,
    labels: list[LabelVolume | None] | None = None,
) -> SubjectTemplate:
    n = len(images)
    if n == 0:
        raise InsufficientTimepoints("template fusion needs at least one timepoint")
    latent_svfs = latent_svfs if latent_svfs is not None else [None] * n
    masks = masks if masks is not None else [None] * n
    labels = labels if labels is not None else [None] * n
    if not (len(latent_rigids) == len(latent_svfs) == len(masks) == len(labels) == n):
        raise ValidationFailure("per-timepoint input lists have mismatched lengths")

    chains = [latent_chain(grid, latent_rigids[i], latent_svfs[i]) for i in range(n)]

    stack = np.stack([resample(images[i], grid, chains[i]).data for i in range(n)])
    intensity = Volume(grid, np.median(stack, axis=0))

    fused_mask = None
    present = [i for i in range(n) if masks[i] is not None]
    if present:
        msum = np.zeros(grid.shape)
        for i in present:
            msum += resample(masks[i], grid, chains[i]).data
        fused_mask = MaskVolume(grid, msum / len(present))

    fused_labels = None
    present = [i for i in range(n) if labels[i] is not None]
    if present:
        ids = sorted({0} | {lab for i in present for lab in labels[i].ids()})
        names = {}
        for i in present:
            for lab, name in labels[i].table.items():
                names.setdefault(lab, name)
        votes = np.zeros(grid.shape + (len(ids),))
        for i in present:
            onehot = np.stack([(labels[i].data == lab).astype(np.float64) for lab in ids], axis=-1)
            vox = labels[i].grid.world_to_voxel(chain_points(grid, chains[i]))
            votes += trilinear_sample(onehot, vox, mode="fill", fill=0.0)
        votes /= len(present)
        fused = np.asarray(ids, dtype=np.int32)[np.argmax(votes, axis=-1)]
        fused_labels = LabelVolume(grid, fused, {lab: names.get(lab, f"label-{lab}") for lab in ids})

    return SubjectTemplate(intensity, fused_mask, fused_labels)
