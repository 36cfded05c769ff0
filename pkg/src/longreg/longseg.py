"""Longitudinally consistent segmentation by weighted label fusion.

Every timepoint's cross-sectional label map is deformed into the reference
frame together with its image, each through a single interpolation. A
Gaussian kernel on the intensity difference to the reference sets each
contributor's voxelwise weight, the deformed one-hot encodings are
accumulated with those weights, and the argmax wins, ties going to the
lowest label id. The reference contributes its own labels with weight one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, MissingLabels, ValidationFailure
from .geometry import grids_close
from .volume_io import LabelVolume, Volume


@dataclass(frozen=True)
class FusionConfig:
    sigma: float = 3.0
    include_self: bool = True
    label_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ValidationFailure("fusion sigma must be positive")


@dataclass(frozen=True)
class SegContribution:
    """One timepoint already deformed into the reference frame.

    `channels` holds the interpolated one-hot encoding, one channel per id
    in `ids`, values in [0, 1] but not necessarily summing to one where the
    source field of view ran out.
    """

    image: Volume
    channels: np.ndarray
    ids: tuple[int, ...]
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        if channels.shape != self.image.grid.shape + (len(self.ids),):
            raise GridMismatch(
                f"one-hot stack shape {channels.shape} does not match "
                f"{self.image.grid.shape} with {len(self.ids)} labels"
            )
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))


def _onehot_contribution(image: Volume, labels: LabelVolume) -> SegContribution:
    ids = labels.ids()
    channels = np.stack([(labels.data == lab) for lab in ids], axis=-1).astype(np.float64)
    return SegContribution(image, channels, ids, dict(labels.table))


def longitudinal_segment(
    reference: Volume,
    contributions: list[SegContribution],
    config: FusionConfig | None = None,
    reference_labels: LabelVolume | None = None,
    return_scores: bool = False,
):
    """Fuse deformed label maps around a reference image's intensities.

    When `config.include_self` is set and `reference_labels` is given, the
    reference participates as one more contributor; its weight is exactly
    one since its intensity difference to itself vanishes.

    Returns the fused LabelVolume, or with `return_scores` a tuple of
    (labels, label ids, normalized vote scores) where scores has one
    trailing channel per id.
    """
    config = config or FusionConfig()
    contributions = list(contributions)
    if config.include_self and reference_labels is not None:
        if not grids_close(reference_labels.grid, reference.grid):
            raise GridMismatch("reference labels live on a different grid than the reference image")
        contributions.append(_onehot_contribution(reference, reference_labels))
    if not contributions:
        raise MissingLabels("no label maps to fuse")

    union = sorted({lab for c in contributions for lab in c.ids})
    if config.label_ids is not None:
        union = sorted(set(config.label_ids) & set(union))
        if not union:
            raise MissingLabels("requested label ids absent from every contribution")
    slot = {lab: i for i, lab in enumerate(union)}

    votes = np.zeros(reference.grid.shape + (len(union),))
    inv_two_sigma2 = 0.0 if math.isinf(config.sigma) else 1.0 / (2.0 * config.sigma**2)
    for contrib in contributions:
        if not grids_close(contrib.image.grid, reference.grid):
            raise GridMismatch("contribution image grid differs from the reference grid")
        diff = reference.data - contrib.image.data
        weight = np.exp(-(diff**2) * inv_two_sigma2)
        for j, lab in enumerate(contrib.ids):
            if lab in slot:
                votes[..., slot[lab]] += weight * contrib.channels[..., j]

    fused = np.asarray(union, dtype=np.int32)[np.argmax(votes, axis=-1)]
    names: dict[int, str] = {}
    for contrib in contributions:
        for lab, name in contrib.names.items():
            names.setdefault(lab, name)
    table = {lab: names.get(lab, f"label-{lab}") for lab in union}
    fused_vol = LabelVolume(reference.grid, fused, table)
    if not return_scores:
        return fused_vol
    total = votes.sum(axis=-1, keepdims=True)
    scores = votes / np.where(total > 0.0, total, 1.0)
    return fused_vol, tuple(union), scores
