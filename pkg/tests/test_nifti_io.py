"""Volume file format and resampling behavior.

The header layout checks parse written bytes with struct against the
published NIfTI-1 field offsets, independent of the reader.
"""

import gzip
import struct

import numpy as np
import pytest

from longreg.errors import (
    GridMismatch,
    IoError,
    LabelMismatch,
    NonFiniteIntensities,
    NotARigidTransform,
    ParseError,
    UnknownLabel,
    UnsupportedDimensionality,
)
from longreg.geometry import DisplacementField, RigidLog, RigidTransform, Svf, se3_exp
from longreg.nifti import read_nifti, write_nifti
from longreg.volume_io import (
    LabelVolume,
    MaskVolume,
    Volume,
    one_hot,
    read_field,
    read_grid,
    read_rigid,
    read_volume,
    resample,
    write_field,
    write_grid,
    write_rigid,
    write_volume,
)
from helpers import centered_grid, index_grid


@pytest.fixture
def grid():
    return centered_grid((6, 7, 8))


class TestNiftiFormat:
    def test_round_trip_dtypes(self, tmp_path):
        rng = np.random.default_rng(0)
        affine = np.eye(4)
        affine[:3, 3] = [-10.0, 3.5, 2.25]
        affine[0, 0] = 1.5
        for dtype in (np.float32, np.float64, np.int16, np.uint8):
            data = (rng.uniform(0, 100, size=(5, 6, 7))).astype(dtype)
            path = str(tmp_path / f"vol_{np.dtype(dtype).name}.nii")
            write_nifti(path, data, affine)
            img = read_nifti(path)
            assert img.data.dtype == dtype
            np.testing.assert_array_equal(img.data, data)
            np.testing.assert_allclose(img.affine, affine, atol=1e-6)

    def test_gzip_by_extension(self, tmp_path):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        path = str(tmp_path / "vol.nii.gz")
        write_nifti(path, data, np.eye(4))
        with open(path, "rb") as fh:
            assert fh.read(2) == b"\x1f\x8b"
        img = read_nifti(path)
        np.testing.assert_array_equal(img.data, data)

    def test_header_layout(self, tmp_path):
        """Byte offsets per the NIfTI-1 standard, parsed independently."""
        data = np.zeros((3, 4, 5), dtype=np.float32)
        affine = np.eye(4)
        affine[:3, 3] = [1.0, 2.0, 3.0]
        path = str(tmp_path / "layout.nii.gz")
        write_nifti(path, data, affine)
        with gzip.open(path, "rb") as fh:
            raw = fh.read()
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        dim = struct.unpack_from("<8h", raw, 40)
        assert dim[0] == 3
        assert tuple(dim[1:4]) == (3, 4, 5)
        datatype, bitpix = struct.unpack_from("<2h", raw, 70)
        assert datatype == 16  # float32
        assert bitpix == 32
        vox_offset = struct.unpack_from("<f", raw, 108)[0]
        assert vox_offset >= 352.0
        sform_code = struct.unpack_from("<h", raw, 254)[0]
        assert sform_code > 0
        srow_x = struct.unpack_from("<4f", raw, 280)
        np.testing.assert_allclose(srow_x, affine[0], atol=1e-6)
        assert raw[344:348] == b"n+1\x00"

    def test_vector_field_dims(self, tmp_path):
        """Vectors are stored 4D with the length-3 component axis last."""
        data = np.zeros((3, 4, 5, 3), dtype=np.float32)
        path = str(tmp_path / "vec.nii.gz")
        write_nifti(path, data, np.eye(4), intent_name="svf")
        with gzip.open(path, "rb") as fh:
            raw = fh.read()
        dim = struct.unpack_from("<8h", raw, 40)
        assert dim[0] == 4
        assert tuple(dim[1:5]) == (3, 4, 5, 3)

    def test_intent_name_round_trip(self, tmp_path):
        path = str(tmp_path / "tagged.nii")
        write_nifti(path, np.zeros((2, 2, 2, 3)), np.eye(4), intent_name="disp")
        assert read_nifti(path).intent_name == "disp"

    def test_extension_round_trip(self, tmp_path):
        payload = b'{"kind": "labels"}'
        path = str(tmp_path / "ext.nii")
        write_nifti(path, np.zeros((2, 2, 2), np.int16), np.eye(4), extensions=[(40, payload)])
        img = read_nifti(path)
        assert len(img.extensions) == 1
        code, blob = img.extensions[0]
        assert code == 40
        assert blob.rstrip(b"\x00") == payload

    def test_read_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            read_nifti(str(tmp_path / "absent.nii.gz"))

    def test_read_garbage(self, tmp_path):
        path = tmp_path / "garbage.nii"
        path.write_bytes(b"not a header" * 40)
        with pytest.raises(ParseError):
            read_nifti(str(path))


class TestVolumeRoundTrips:
    def test_image(self, tmp_path, grid):
        rng = np.random.default_rng(1)
        vol = Volume(grid, rng.normal(size=grid.shape))
        path = str(tmp_path / "img.nii.gz")
        write_volume(path, vol)
        back = read_volume(path)
        assert isinstance(back, Volume)
        np.testing.assert_array_equal(back.data, vol.data)
        np.testing.assert_allclose(back.grid.affine, grid.affine, atol=1e-6)

    def test_mask_kind_preserved(self, tmp_path, grid):
        mask = MaskVolume(grid, (np.arange(np.prod(grid.shape)) % 2).reshape(grid.shape).astype(float))
        path = str(tmp_path / "mask.nii.gz")
        write_volume(path, mask)
        back = read_volume(path)
        assert isinstance(back, MaskVolume)
        np.testing.assert_array_equal(back.data, mask.data)

    def test_labels_with_table(self, tmp_path, grid):
        data = np.zeros(grid.shape, np.int32)
        data[2:4, 2:4, 2:4] = 7
        labels = LabelVolume(grid, data, {0: "background", 7: "hippocampus"})
        path = str(tmp_path / "seg.nii.gz")
        write_volume(path, labels)
        back = read_volume(path)
        assert isinstance(back, LabelVolume)
        np.testing.assert_array_equal(back.data, data)
        assert back.table[7] == "hippocampus"
        assert back.ids() == [0, 7]

    def test_integer_data_defaults_to_labels(self, tmp_path, grid):
        write_nifti(str(tmp_path / "ints.nii"), np.ones(grid.shape, np.int16), grid.affine)
        back = read_volume(str(tmp_path / "ints.nii"))
        assert isinstance(back, LabelVolume)

    def test_explicit_kind_override(self, tmp_path, grid):
        vol = Volume(grid, np.ones(grid.shape))
        path = str(tmp_path / "img.nii")
        write_volume(path, vol)
        back = read_volume(path, kind="mask")
        assert isinstance(back, MaskVolume)

    def test_nan_rejected(self, grid):
        bad = np.ones(grid.shape)
        bad[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteIntensities):
            Volume(grid, bad)

    def test_label_validation(self, grid):
        with pytest.raises(UnknownLabel):
            LabelVolume(grid, np.full(grid.shape, -1, np.int32))
        with pytest.raises(LabelMismatch):
            LabelVolume(grid, np.full(grid.shape, 0.5))

    def test_read_field_on_scalar_volume(self, tmp_path, grid):
        path = str(tmp_path / "img.nii")
        write_volume(path, Volume(grid, np.zeros(grid.shape)))
        with pytest.raises(UnsupportedDimensionality):
            read_field(path)

    def test_read_volume_on_vector_file(self, tmp_path, grid):
        path = str(tmp_path / "vec.nii")
        write_field(path, Svf(grid, np.zeros(grid.shape + (3,))))
        with pytest.raises(UnsupportedDimensionality):
            read_volume(path)


class TestFieldRoundTrips:
    def test_svf_tag(self, tmp_path, grid):
        rng = np.random.default_rng(2)
        fld = Svf(grid, rng.normal(size=grid.shape + (3,)))
        path = str(tmp_path / "vel.svf.nii.gz")
        write_field(path, fld)
        back = read_field(path)
        assert isinstance(back, Svf)
        np.testing.assert_array_equal(back.values, fld.values)

    def test_displacement_tag(self, tmp_path, grid):
        fld = DisplacementField(grid, np.zeros(grid.shape + (3,)))
        path = str(tmp_path / "disp.nii.gz")
        write_field(path, fld)
        assert isinstance(read_field(path), DisplacementField)

    def test_unknown_tag_rejected(self, tmp_path, grid):
        path = str(tmp_path / "odd.nii")
        write_nifti(path, np.zeros(grid.shape + (3,)), grid.affine, intent_name="velocity")
        with pytest.raises(ParseError):
            read_field(path)


class TestRigidFiles:
    def test_round_trip(self, tmp_path):
        t = se3_exp(RigidLog.from_vector([0.2, -0.1, 0.3, 4.0, -2.0, 1.0]))
        path = str(tmp_path / "pair.rigid.txt")
        write_rigid(path, t)
        back = read_rigid(path)
        np.testing.assert_allclose(back.matrix(), t.matrix(), atol=1e-12)

    def test_non_rigid_matrix_rejected(self, tmp_path):
        path = tmp_path / "bad.rigid.txt"
        rows = np.eye(4)
        rows[1, 1] = 3.0
        path.write_text("\n".join(" ".join(f"{v:.17g}" for v in row) for row in rows) + "\n")
        with pytest.raises(NotARigidTransform):
            read_rigid(str(path))


class TestGridFiles:
    def test_round_trip(self, tmp_path):
        grid = centered_grid((30, 34, 38), spacing=1.0)
        path = str(tmp_path / "grid.json")
        write_grid(path, grid)
        back = read_grid(path)
        assert back.shape == grid.shape
        np.testing.assert_allclose(back.affine, grid.affine, atol=1e-12)


class TestResample:
    def test_identity_same_grid(self, grid):
        rng = np.random.default_rng(3)
        vol = Volume(grid, rng.normal(size=grid.shape))
        out = resample(vol, grid, [])
        np.testing.assert_array_equal(out.data, vol.data)

    def test_world_translation_shifts_content(self):
        """A transform carrying destination coordinates into the source
        frame samples the source there, so a ramp gains the offset."""
        shape = (12, 12, 12)
        grid = centered_grid(shape)
        world_x = grid.voxel_to_world(index_grid(shape))[..., 0]
        ramp = Volume(grid, world_x)
        shift = RigidTransform(np.eye(3), np.array([3.0, 0.0, 0.0]))
        out = resample(ramp, grid, [shift])
        # keep to destination voxels whose shifted position stays inside
        region = (slice(1, 8),) + (slice(1, -1),) * 2
        np.testing.assert_allclose(
            out.data[region], world_x[region] + 3.0, atol=1e-10
        )

    def test_across_grids_preserves_world_content(self):
        src_grid = centered_grid((16, 16, 16))
        dst_grid = centered_grid((20, 20, 20))
        world = src_grid.voxel_to_world(index_grid((16, 16, 16)))
        vol = Volume(src_grid, world[..., 1])
        out = resample(vol, dst_grid, [])
        dworld = dst_grid.voxel_to_world(index_grid((20, 20, 20)))
        inside = np.all(np.abs(dworld) <= 6.0, axis=-1)
        np.testing.assert_allclose(out.data[inside], dworld[..., 1][inside], atol=1e-10)

    def test_outside_fill_zero(self):
        src_grid = centered_grid((8, 8, 8))
        dst_grid = centered_grid((16, 16, 16))
        vol = Volume(src_grid, np.full((8, 8, 8), 5.0))
        out = resample(vol, dst_grid, [])
        assert out.data[0, 0, 0] == 0.0
        assert out.data[8, 8, 8] == 5.0

    def test_labels_stay_integer_and_move_together(self):
        shape = (14, 14, 14)
        grid = centered_grid(shape)
        data = np.zeros(shape, np.int32)
        data[4:8, 4:8, 4:8] = 2
        data[9:12, 9:12, 9:12] = 5
        labels = LabelVolume(grid, data, {2: "left", 5: "right"})
        shift = RigidTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))
        out = resample(labels, grid, [shift])
        assert isinstance(out, LabelVolume)
        assert set(np.unique(out.data)) <= {0, 2, 5}
        # integer translation by one voxel in x
        np.testing.assert_array_equal(out.data[3:7, 4:8, 4:8], np.full((4, 4, 4), 2))
        assert out.table[5] == "right"

    def test_mask_stays_in_unit_range(self, grid):
        rng = np.random.default_rng(4)
        mask = MaskVolume(grid, (rng.uniform(size=grid.shape) > 0.5).astype(float))
        out = resample(mask, centered_grid((9, 9, 9)), [])
        assert isinstance(out, MaskVolume)
        assert out.data.min() >= 0.0
        assert out.data.max() <= 1.0

    def test_displacement_transform_matches_manual(self):
        shape = (12, 12, 12)
        grid = centered_grid(shape)
        rng = np.random.default_rng(5)
        vol = Volume(grid, rng.normal(size=shape))
        disp = DisplacementField(grid, np.broadcast_to([2.0, 0.0, 0.0], shape + (3,)).copy())
        out = resample(vol, grid, [disp])
        np.testing.assert_allclose(out.data[:-2], vol.data[2:], atol=1e-12)


class TestOneHot:
    def test_channels_partition(self, grid):
        rng = np.random.default_rng(6)
        data = rng.integers(0, 3, size=grid.shape).astype(np.int32)
        labels = LabelVolume(grid, data)
        channels = one_hot(labels)
        total = sum(c.data for c in channels)
        np.testing.assert_array_equal(total, np.ones(grid.shape))
        rebuilt = np.argmax(np.stack([c.data for c in channels], axis=-1), axis=-1)
        np.testing.assert_array_equal(rebuilt, data)

    def test_selected_subset(self, grid):
        data = np.zeros(grid.shape, np.int32)
        data[0, 0, 0] = 4
        labels = LabelVolume(grid, data)
        channels = one_hot(labels, selected=[4])
        assert len(channels) == 1
        assert channels[0].data[0, 0, 0] == 1.0
        assert channels[0].data[1, 1, 1] == 0.0
