"""NIfTI-1 reader/writer: header parsing, scaling, rejection paths."""

import gzip
import struct

import numpy as np
import pytest

from effvit.nifti import DATATYPES, NiftiParseError, Volume, read_nifti, write_nifti


def make_blob(
    dims=(2, 2, 2),
    datatype=16,
    payload=None,
    magic=b"n+1\x00",
    vox_offset=352.0,
    scl_slope=1.0,
    scl_inter=0.0,
    bitpix=None,
    ndim=3,
):
    """Hand-assembled NIfTI-1 blob, independent of write_nifti."""
    dt = DATATYPES[datatype]
    header = bytearray(352)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, ndim, *dims, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, bitpix if bitpix is not None else dt.itemsize * 8)
    struct.pack_into("<f", header, 108, vox_offset)
    struct.pack_into("<2f", header, 112, scl_slope, scl_inter)
    header[344:348] = magic
    if payload is None:
        payload = np.arange(np.prod(dims), dtype=dt).tobytes()
    return bytes(header) + payload


def test_minimal_float32_volume():
    values = np.arange(8, dtype="<f4")
    vol = read_nifti(make_blob(payload=values.tobytes()))
    assert vol.dims == (2, 2, 2)
    assert vol.datatype == 16
    # Fortran order: x varies fastest
    np.testing.assert_array_equal(
        vol.voxels, values.astype(np.float64).reshape((2, 2, 2), order="F")
    )
    assert vol.voxels[1, 0, 0] == 1.0


def test_affine_scaling_applied():
    values = np.array([0.0, 1.0], dtype="<f4")
    vol = read_nifti(make_blob(dims=(2, 1, 1), payload=values.tobytes(),
                               scl_slope=2.0, scl_inter=1.0))
    np.testing.assert_array_equal(vol.voxels.reshape(-1), [1.0, 3.0])


def test_zero_slope_means_unscaled():
    values = np.array([5.0, 7.0], dtype="<f4")
    vol = read_nifti(make_blob(dims=(2, 1, 1), payload=values.tobytes(),
                               scl_slope=0.0, scl_inter=99.0))
    np.testing.assert_array_equal(vol.voxels.reshape(-1), [5.0, 7.0])


def test_gzip_payload_transparent():
    blob = make_blob()
    plain = read_nifti(blob)
    zipped = read_nifti(gzip.compress(blob))
    np.testing.assert_array_equal(plain.voxels, zipped.voxels)


def test_bad_magic_rejected():
    with pytest.raises(NiftiParseError) as ei:
        read_nifti(make_blob(magic=b"bad\x00"))
    assert ei.value.offset == 344


def test_bad_sizeof_hdr_rejected():
    blob = bytearray(make_blob())
    struct.pack_into("<i", blob, 0, 999)
    with pytest.raises(NiftiParseError):
        read_nifti(bytes(blob))


def test_truncated_payload_rejected():
    blob = make_blob()
    with pytest.raises(NiftiParseError) as ei:
        read_nifti(blob[:-4])
    assert "truncated" in str(ei.value)


def test_short_header_rejected():
    with pytest.raises(NiftiParseError):
        read_nifti(b"\x00" * 100)


def test_unsupported_datatype_rejected():
    blob = bytearray(make_blob())
    struct.pack_into("<h", blob, 70, 8)  # int32: unsupported
    with pytest.raises(NiftiParseError):
        read_nifti(bytes(blob))


def test_inconsistent_bitpix_rejected():
    with pytest.raises(NiftiParseError):
        read_nifti(make_blob(bitpix=8))


def test_non_3d_rejected():
    with pytest.raises(NiftiParseError):
        read_nifti(make_blob(ndim=4))


def test_vox_offset_inside_header_rejected():
    with pytest.raises(NiftiParseError):
        read_nifti(make_blob(vox_offset=100.0))


@pytest.mark.parametrize("datatype", sorted(DATATYPES))
def test_roundtrip_exact_per_datatype(datatype):
    rng = np.random.default_rng(datatype)
    if DATATYPES[datatype].kind in "iu":
        info = np.iinfo(DATATYPES[datatype])
        vox = rng.integers(info.min, info.max, size=(3, 4, 5)).astype(np.float64)
    else:
        vox = rng.normal(size=(3, 4, 5)).astype(DATATYPES[datatype]).astype(np.float64)
    vol = Volume(voxels=vox, datatype=datatype)
    back = read_nifti(write_nifti(vol))
    np.testing.assert_array_equal(back.voxels, vox)
    assert back.datatype == datatype


def test_roundtrip_with_scaling():
    vox = np.array([1.0, 3.0, 5.0, 7.0]).reshape(4, 1, 1)
    vol = Volume(voxels=vox, datatype=4)
    back = read_nifti(write_nifti(vol, scl_slope=2.0, scl_inter=1.0))
    np.testing.assert_array_equal(back.voxels, vox)


def test_roundtrip_preserves_fortran_order():
    vox = np.arange(24, dtype=np.float64).reshape((2, 3, 4))
    back = read_nifti(write_nifti(Volume(voxels=vox, datatype=64)))
    np.testing.assert_array_equal(back.voxels, vox)


def test_write_rejects_unknown_datatype():
    with pytest.raises(NiftiParseError):
        write_nifti(Volume(voxels=np.zeros((1, 1, 1))), datatype=8)
