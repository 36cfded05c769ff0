"""Weighted label fusion for longitudinally consistent segmentation."""

import numpy as np
import pytest

from longreg.errors import GridMismatch, MissingLabels, ValidationFailure
from longreg.longseg import FusionConfig, SegContribution, longitudinal_segment
from longreg.volume_io import LabelVolume, Volume
from helpers import centered_grid

SHAPE = (6, 6, 6)


@pytest.fixture
def grid():
    return centered_grid(SHAPE)


def flat_image(grid, value):
    return Volume(grid, np.full(grid.shape, float(value)))


def onehot_contribution(grid, value, label, name=None):
    """Contributor with constant intensity and a single label everywhere."""
    channels = np.ones(grid.shape + (1,))
    names = {} if name is None else {label: name}
    return SegContribution(flat_image(grid, value), channels, (label,), names)


class TestSingleTimepoint:
    def test_reference_alone_is_identity(self, grid):
        rng = np.random.default_rng(0)
        reference = Volume(grid, rng.normal(100.0, 10.0, SHAPE))
        data = rng.integers(0, 3, SHAPE).astype(np.int32)
        labels = LabelVolume(grid, data, {0: "background", 1: "left", 2: "right"})
        fused = longitudinal_segment(reference, [], reference_labels=labels)
        np.testing.assert_array_equal(fused.data, data)
        assert fused.table == labels.table

    def test_no_votes_at_all(self, grid):
        with pytest.raises(MissingLabels):
            longitudinal_segment(flat_image(grid, 100.0), [])


class TestIntensityWeighting:
    def test_reference_outvotes_distant_contributor(self, grid):
        """A contributor 2 sigma away carries weight e^-2 against the
        reference's weight of exactly one."""
        reference = flat_image(grid, 100.0)
        ref_labels = LabelVolume(grid, np.ones(SHAPE, np.int32), {1: "roi"})
        contrib = onehot_contribution(grid, 106.0, 2)
        fused, ids, scores = longitudinal_segment(
            reference,
            [contrib],
            FusionConfig(sigma=3.0),
            reference_labels=ref_labels,
            return_scores=True,
        )
        assert np.all(fused.data == 1)
        assert ids == (1, 2)
        w = np.exp(-2.0)
        np.testing.assert_allclose(scores[..., 0], 1.0 / (1.0 + w), atol=1e-12)
        np.testing.assert_allclose(scores[..., 1], w / (1.0 + w), atol=1e-12)

    def test_huge_sigma_reduces_to_majority_vote(self, grid):
        """With sigma far above any intensity difference every vote counts
        the same, so three contributors overrule the reference."""
        reference = flat_image(grid, 100.0)
        ref_labels = LabelVolume(grid, np.ones(SHAPE, np.int32), {1: "roi"})
        contribs = [onehot_contribution(grid, 106.0, 2) for _ in range(3)]
        fused = longitudinal_segment(
            reference,
            contribs,
            FusionConfig(sigma=1e6),
            reference_labels=ref_labels,
        )
        assert np.all(fused.data == 2)

    def test_exclude_self(self, grid):
        reference = flat_image(grid, 100.0)
        ref_labels = LabelVolume(grid, np.ones(SHAPE, np.int32), {1: "roi"})
        contrib = onehot_contribution(grid, 190.0, 2)
        fused = longitudinal_segment(
            reference,
            [contrib],
            FusionConfig(sigma=3.0, include_self=False),
            reference_labels=ref_labels,
        )
        assert np.all(fused.data == 2)

    def test_ties_go_to_the_lowest_id(self, grid):
        reference = flat_image(grid, 100.0)
        fused = longitudinal_segment(
            reference,
            [onehot_contribution(grid, 100.0, 5), onehot_contribution(grid, 100.0, 2)],
        )
        assert np.all(fused.data == 2)

    def test_voxelwise_not_global(self, grid):
        """The weighting acts per voxel: where the contributor matches the
        reference intensity its label wins, elsewhere the reference holds."""
        ref_data = np.full(SHAPE, 100.0)
        ref_data[3:] = 40.0
        reference = Volume(grid, ref_data)
        ref_labels = LabelVolume(grid, np.ones(SHAPE, np.int32), {1: "old"})
        contrib = SegContribution(
            flat_image(grid, 100.0), np.ones(SHAPE + (1,)), (2,), {2: "new"}
        )
        fused = longitudinal_segment(
            reference,
            [contrib, contrib],
            FusionConfig(sigma=3.0),
            reference_labels=ref_labels,
        )
        assert np.all(fused.data[:3] == 2)
        assert np.all(fused.data[3:] == 1)


class TestLabelBookkeeping:
    def test_label_subset_selection(self, grid):
        reference = flat_image(grid, 100.0)
        channels = np.zeros(SHAPE + (2,))
        channels[:3, ..., 0] = 1.0
        channels[3:, ..., 1] = 1.0
        contrib = SegContribution(flat_image(grid, 100.0), channels, (2, 7))
        fused = longitudinal_segment(
            reference, [contrib], FusionConfig(label_ids=(2,))
        )
        assert set(np.unique(fused.data)) == {2}

    def test_absent_requested_labels(self, grid):
        reference = flat_image(grid, 100.0)
        contrib = onehot_contribution(grid, 100.0, 2)
        with pytest.raises(MissingLabels):
            longitudinal_segment(reference, [contrib], FusionConfig(label_ids=(9,)))

    def test_names_survive_fusion(self, grid):
        reference = flat_image(grid, 100.0)
        ref_labels = LabelVolume(grid, np.ones(SHAPE, np.int32), {1: "roi"})
        contrib = onehot_contribution(grid, 100.0, 2, name="ventricle")
        fused = longitudinal_segment(reference, [contrib], reference_labels=ref_labels)
        assert fused.table[1] == "roi"
        assert fused.table[2] == "ventricle"

    def test_unnamed_labels_get_placeholders(self, grid):
        reference = flat_image(grid, 100.0)
        fused = longitudinal_segment(reference, [onehot_contribution(grid, 100.0, 4)])
        assert fused.table[4] == "label-4"

    def test_scores_normalized_where_votes_exist(self, grid):
        reference = flat_image(grid, 100.0)
        channels = np.ones(SHAPE + (1,))
        channels[0] = 0.0
        contrib = SegContribution(flat_image(grid, 100.0), channels, (3,))
        fused, ids, scores = longitudinal_segment(
            reference, [contrib], return_scores=True
        )
        assert ids == (3,)
        np.testing.assert_allclose(scores[1:].sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(scores[0] == 0.0)
        assert np.all(fused.data == 3)


class TestValidation:
    def test_sigma_must_be_positive(self):
        with pytest.raises(ValidationFailure):
            FusionConfig(sigma=0.0)

    def test_contribution_shape_checked(self, grid):
        with pytest.raises(GridMismatch):
            SegContribution(flat_image(grid, 1.0), np.ones(SHAPE + (2,)), (1,))

    def test_contribution_grid_checked(self, grid):
        other = centered_grid((7, 7, 7))
        contrib = onehot_contribution(other, 100.0, 2)
        with pytest.raises(GridMismatch):
            longitudinal_segment(flat_image(grid, 100.0), [contrib])

    def test_reference_labels_grid_checked(self, grid):
        other = centered_grid((7, 7, 7))
        labels = LabelVolume(other, np.ones((7, 7, 7), np.int32), {1: "roi"})
        with pytest.raises(GridMismatch):
            longitudinal_segment(
                flat_image(grid, 100.0), [], reference_labels=labels
            )
