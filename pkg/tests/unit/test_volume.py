"""Tests for volumes and the .pvol container."""

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.services.errors import ClassIndexError, DataFormatError, GeometryError
from src.services.models import ClassRoster
from src.services.volume import (
    MAGIC,
    LabelVolume,
    Volume3D,
    check_geometry,
    check_roster,
    decode_volume,
    encode_volume,
    one_hot_mask,
    read_labels,
    read_suv,
    read_volume,
    write_volume,
)


class TestVolume3D:
    """Tests for Volume3D."""

    def test_shape_is_z_y_x(self, small_volume: Volume3D):
        """Test dims are (nx, ny, nz) and the array is (nz, ny, nx)."""
        assert small_volume.dims == (6, 5, 4)
        assert small_volume.shape == (4, 5, 6)

    def test_immutable(self, small_volume: Volume3D):
        """Test the data array cannot be written."""
        with pytest.raises(ValueError):
            small_volume.data[0, 0, 0] = 1.0

    def test_flat_data_x_fastest(self):
        """Test a flat payload is read x fastest."""
        volume = Volume3D((3, 2, 1), (1.0, 1.0, 1.0), np.arange(6, dtype=np.float32))
        assert volume.data[0, 1, 0] == 3.0
        assert volume.data[0, 0, 2] == 2.0

    def test_length_mismatch(self):
        """Test data length must equal nx*ny*nz."""
        with pytest.raises(DataFormatError):
            Volume3D((2, 2, 2), (1.0, 1.0, 1.0), np.zeros(7))

    def test_negative_values_rejected(self):
        """Test SUV must be non-negative."""
        with pytest.raises(DataFormatError):
            Volume3D((1, 1, 2), (1.0, 1.0, 1.0), np.array([1.0, -0.5]))

    def test_non_finite_rejected(self):
        """Test SUV must be finite."""
        with pytest.raises(DataFormatError):
            Volume3D((1, 1, 2), (1.0, 1.0, 1.0), np.array([1.0, np.nan]))

    def test_bad_spacing(self):
        """Test voxel sizes must be positive."""
        with pytest.raises(GeometryError):
            Volume3D((1, 1, 1), (1.0, 0.0, 1.0), np.zeros(1))

    def test_voxel_volume(self):
        """Test voxel volume in millilitres."""
        volume = Volume3D((1, 1, 1), (2.0, 2.0, 2.5), np.zeros(1))
        assert volume.voxel_volume_ml == pytest.approx(0.01)


class TestLabelVolume:
    """Tests for LabelVolume and masks."""

    def test_values_in_roster(self):
        """Test label values must lie in [0, S]."""
        with pytest.raises(ClassIndexError):
            LabelVolume((2, 1, 1), (1.0, 1.0, 1.0), np.array([0, 3]), num_classes=3)

    def test_one_hot_mask(self, small_labels: LabelVolume):
        """Test the class mask matches the label data."""
        mask = one_hot_mask(small_labels, 2)
        np.testing.assert_array_equal(mask.data, (small_labels.data == 2).astype(np.float32))

    def test_one_hot_channels_partition(self, small_labels: LabelVolume):
        """Test the class masks sum to exactly one at every voxel."""
        total = sum(one_hot_mask(small_labels, s).data for s in range(small_labels.num_classes))
        np.testing.assert_array_equal(total, np.ones(small_labels.shape, dtype=np.float32))

    def test_one_hot_out_of_range(self, small_labels: LabelVolume):
        """Test an index above S is rejected."""
        with pytest.raises(ClassIndexError):
            one_hot_mask(small_labels, 4)

    def test_roster_mismatch(self, small_labels: LabelVolume):
        """Test a roster with a different class count is rejected."""
        with pytest.raises(ClassIndexError):
            check_roster(small_labels, ClassRoster.from_organs(["liver"]))

    def test_geometry_mismatch(self, small_volume: Volume3D):
        """Test paired volumes need equal dims and spacing."""
        other = Volume3D((6, 5, 4), (2.0, 2.0, 3.0), np.zeros(120))
        with pytest.raises(GeometryError):
            check_geometry(small_volume, other)


class TestContainer:
    """Tests for the .pvol encoding."""

    def test_round_trip_suv(self, temp_dir: Path, small_volume: Volume3D):
        """Test SUV volumes survive a write/read unchanged."""
        write_volume(small_volume, temp_dir / "v.pvol")
        loaded = read_suv(temp_dir / "v.pvol")
        assert loaded.dims == small_volume.dims
        assert loaded.voxel_mm == small_volume.voxel_mm
        np.testing.assert_array_equal(loaded.data, small_volume.data)

    def test_round_trip_labels(self, temp_dir: Path, small_labels: LabelVolume):
        """Test label volumes keep their class count."""
        write_volume(small_labels, temp_dir / "l.pvol")
        loaded = read_labels(temp_dir / "l.pvol")
        assert loaded.num_classes == 4
        np.testing.assert_array_equal(loaded.data, small_labels.data)

    @settings(max_examples=30, deadline=None)
    @given(
        dims=st.tuples(*[st.integers(1, 8)] * 3),
        spacing=st.tuples(*[st.floats(0.05, 20.0, allow_nan=False)] * 3),
        num_classes=st.integers(1, 12),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_any_geometry(self, dims, spacing, num_classes, seed):
        """Test decoding an encoded volume returns it unchanged for any geometry."""
        rng = np.random.default_rng(seed)
        n = dims[0] * dims[1] * dims[2]
        suv = Volume3D(dims, spacing, rng.uniform(0.0, 25.0, size=n))
        labels = LabelVolume(dims, spacing, rng.integers(0, num_classes, size=n), num_classes=num_classes)

        loaded_suv = decode_volume(encode_volume(suv))
        assert loaded_suv.dims == suv.dims and loaded_suv.voxel_mm == suv.voxel_mm
        np.testing.assert_array_equal(loaded_suv.data, suv.data)

        loaded_labels = decode_volume(encode_volume(labels))
        assert loaded_labels.dims == labels.dims and loaded_labels.voxel_mm == labels.voxel_mm
        assert loaded_labels.num_classes == num_classes
        np.testing.assert_array_equal(loaded_labels.data, labels.data)

    def test_deterministic_bytes(self, small_volume: Volume3D):
        """Test the same volume always encodes to the same bytes."""
        assert encode_volume(small_volume) == encode_volume(small_volume.with_data(small_volume.data))

    def test_layout(self):
        """Test magic, header line, separator and x-fastest payload."""
        volume = Volume3D((2, 1, 1), (1.0, 1.0, 1.0), np.array([1.0, 2.0]))
        blob = encode_volume(volume)
        assert blob.startswith(MAGIC)
        end = blob.index(b"\n", len(MAGIC))
        header = json.loads(blob[len(MAGIC) : end])
        assert header == {"dims": [2, 1, 1], "voxel_mm": [1.0, 1.0, 1.0], "dtype": "f32le", "kind": "suv"}
        assert blob[end + 1 : end + 2] == b"\x00"
        np.testing.assert_array_equal(np.frombuffer(blob[end + 2 :], dtype="<f4"), [1.0, 2.0])

    def test_bad_magic(self, small_volume: Volume3D):
        """Test a wrong magic is reported as such."""
        with pytest.raises(DataFormatError) as exc_info:
            decode_volume(b"PVOL2\n" + encode_volume(small_volume)[6:])
        assert exc_info.value.field == "magic"

    def test_truncated_payload(self, small_volume: Volume3D):
        """Test a short payload is rejected."""
        with pytest.raises(DataFormatError) as exc_info:
            decode_volume(encode_volume(small_volume)[:-4])
        assert exc_info.value.field == "payload"

    def test_kind_dtype_mismatch(self):
        """Test label kind with float dtype is rejected."""
        header = b'{"dims":[1,1,1],"voxel_mm":[1,1,1],"dtype":"f32le","kind":"label","num_classes":2}\n'
        with pytest.raises(DataFormatError):
            decode_volume(MAGIC + header + b"\x00" + np.zeros(1, "<f4").tobytes())

    def test_label_out_of_range_on_read(self):
        """Test a stored label above S is a data error."""
        header = b'{"dims":[1,1,1],"voxel_mm":[1,1,1],"dtype":"u8","kind":"label","num_classes":2}\n'
        with pytest.raises(DataFormatError):
            decode_volume(MAGIC + header + b"\x00" + bytes([5]))

    def test_read_wrong_kind(self, temp_dir: Path, small_labels: LabelVolume):
        """Test reading labels as SUV fails."""
        write_volume(small_labels, temp_dir / "l.pvol")
        with pytest.raises(DataFormatError):
            read_suv(temp_dir / "l.pvol")

    def test_missing_file(self, temp_dir: Path):
        """Test a missing file is a data error."""
        with pytest.raises(DataFormatError):
            read_volume(temp_dir / "missing.pvol")
