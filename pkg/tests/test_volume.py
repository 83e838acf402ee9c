import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from harmonize3d.volume import (
    DegenerateVolumeWarning,
    LabeledVolume,
    LabelVector,
    NotNiftiError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    Volume,
    normalize,
    read_nifti,
    write_nifti,
)


def handmade_nifti(path, data, datatype, bitpix, slope=0.0, inter=0.0, magic=b"n+1\x00", spacing=(1.0, 1.0, 1.0)):
    """Assemble a NIfTI-1 file field by field with struct, independent of the reader's layout table."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = magic
    with open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00" * 4 + data.tobytes(order="F"))


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.standard_normal((5, 6, 7)), spacing=(1.5, 2.0, 0.75))
    write_nifti(vol, tmp_path / "v.nii")
    back = read_nifti(tmp_path / "v.nii")
    assert back.extents == (5, 6, 7)
    assert back.spacing == (1.5, 2.0, 0.75)
    assert back.voxels.tobytes() == vol.voxels.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.floats(0.01, 10.0, allow_nan=False)] * 3))
def test_spacing_round_trip_is_exact_at_any_value(tmp_path_factory, spacing):
    # the header stores pixdim as float32; the volume holds spacing at that precision
    path = tmp_path_factory.mktemp("sp") / "v.nii"
    vol = Volume(np.zeros((2, 2, 2)), spacing=spacing)
    assert vol.spacing == tuple(float(np.float32(s)) for s in spacing)
    write_nifti(vol, path)
    assert read_nifti(path).spacing == vol.spacing


def test_header_constants(tmp_path):
    write_nifti(Volume(np.zeros((2, 3, 4))), tmp_path / "v.nii")
    raw = (tmp_path / "v.nii").read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert raw[344:348] == b"n+1\x00"
    assert len(raw) == 352 + 2 * 3 * 4 * 4


def test_orientation_survives_round_trip(tmp_path):
    srow = [[0.0, -1.0, 0.0, 10.0], [1.0, 0.0, 0.0, -5.0], [0.0, 0.0, 2.0, 3.0]]
    orient = {"sform_code": 2, "srow_x": srow[0], "srow_y": srow[1], "srow_z": srow[2], "qform_code": 0, "qfac": -1.0}
    write_nifti(Volume(np.ones((2, 2, 2)), orientation=orient), tmp_path / "a.nii")
    first = read_nifti(tmp_path / "a.nii")
    write_nifti(first, tmp_path / "b.nii")
    assert (tmp_path / "a.nii").read_bytes() == (tmp_path / "b.nii").read_bytes()
    assert first.orientation["srow_y"] == srow[1]
    assert first.orientation["qfac"] == -1.0


def test_wrong_magic(tmp_path):
    handmade_nifti(tmp_path / "bad.nii", np.zeros((2, 2, 2), "<f4"), 16, 32, magic=b"ni1\x00")
    with pytest.raises(NotNiftiError, match="not NIfTI-1"):
        read_nifti(tmp_path / "bad.nii")


def test_unsupported_datatype(tmp_path):
    handmade_nifti(tmp_path / "f64.nii", np.zeros((2, 2, 2), "<f8"), 64, 64)
    with pytest.raises(UnsupportedDatatypeError, match="datatype"):
        read_nifti(tmp_path / "f64.nii")


def test_truncated_payload(tmp_path):
    handmade_nifti(tmp_path / "t.nii", np.zeros((4, 4, 4), "<f4"), 16, 32)
    raw = (tmp_path / "t.nii").read_bytes()
    (tmp_path / "t.nii").write_bytes(raw[:-10])
    with pytest.raises(TruncatedPayloadError, match="truncated"):
        read_nifti(tmp_path / "t.nii")


def test_int16_scaling(tmp_path):
    v = np.arange(8, dtype="<i2").reshape(2, 2, 2) - 3
    handmade_nifti(tmp_path / "s.nii", v, 4, 16, slope=2.0, inter=1.0)
    vol = read_nifti(tmp_path / "s.nii")
    expected = np.array([[[2 * x + 1 for x in row] for row in plane] for plane in v.tolist()], dtype=np.float32)
    np.testing.assert_array_equal(vol.voxels, expected)
    assert vol.intensity_range == (float(expected.min()), float(expected.max()))


def test_uint8_payload(tmp_path):
    v = np.arange(24, dtype="u1").reshape(2, 3, 4)
    handmade_nifti(tmp_path / "u.nii", v, 2, 8)
    np.testing.assert_array_equal(read_nifti(tmp_path / "u.nii").voxels, v.astype(np.float32))


def test_readable_by_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(3)
    vol = Volume(rng.uniform(size=(4, 5, 6)), spacing=(1.0, 2.0, 3.0))
    write_nifti(vol, tmp_path / "v.nii")
    img = nib.load(str(tmp_path / "v.nii"))
    np.testing.assert_array_equal(np.asarray(img.dataobj), vol.voxels)
    assert img.header.get_zooms() == (1.0, 2.0, 3.0)


def test_normalize_identity_when_already_spanning():
    rng = np.random.default_rng(1)
    v = rng.uniform(size=(10, 10, 10))
    v.flat[:10] = 0.0
    v.flat[-10:] = 1.0
    out = normalize(Volume(v))
    np.testing.assert_allclose(out.voxels, v.astype(np.float32), atol=1e-6)


def test_normalize_constant_volume_warns():
    with pytest.warns(DegenerateVolumeWarning):
        out = normalize(Volume(np.full((3, 3, 3), 4.0)))
    assert not out.voxels.any()


def test_normalize_ramp_midpoint():
    ramp = np.linspace(0.0, 100.0, 1000).reshape(10, 10, 10)
    out = normalize(Volume(ramp), 0.005, 0.995)
    # closed form: lo ~ 0.5, hi ~ 99.5 for a uniform ramp, so 50 -> (50 - 0.5) / 99
    mid = np.argmin(np.abs(ramp - 50.0))
    assert abs(out.voxels.flat[mid] - 0.5) < 0.01


def test_normalize_bad_percentiles():
    with pytest.raises(ValueError):
        normalize(Volume(np.ones((2, 2, 2))), 0.5, 0.5)


volumes = arrays(np.float32, (4, 4, 4), elements=st.floats(-50, 50, width=32))


@settings(max_examples=40, deadline=None)
@given(volumes)
def test_normalize_idempotent(v):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateVolumeWarning)
        once = normalize(Volume(v))
        twice = normalize(once)
    np.testing.assert_allclose(twice.voxels, once.voxels, atol=1e-6)
    assert once.voxels.min() >= 0.0 and once.voxels.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(volumes)
def test_normalize_monotone(v):
    # the intensity map is non-decreasing: voxel order is preserved
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateVolumeWarning)
        out = normalize(Volume(v)).voxels
    order = np.argsort(v, axis=None, kind="stable")
    assert np.all(np.diff(out.reshape(-1)[order]) >= 0)


def test_label_vectors():
    assert LabelVector.site(1, 3).entries == (-1, 1, -1)
    assert LabelVector.agnostic(4).index is None
    with pytest.raises(ValueError):
        LabelVector((1, 1, -1))
    with pytest.raises(ValueError):
        LabelVector((0, 1))
    with pytest.raises(ValueError):
        LabelVector.site(3, 3)
    with pytest.raises(ValueError):
        LabeledVolume(Volume(np.zeros((2, 2, 2))), LabelVector.agnostic(3))


def test_volume_rejects_non_finite():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.inf]]]))
