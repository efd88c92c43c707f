"""Minimal single-file NIfTI-1 reader/writer.

Only the fields this pipeline needs are honored: sizeof_hdr, dim[0..3],
datatype, bitpix, scl_slope, scl_inter, vox_offset, magic.  Everything
is little-endian.  Gzip payloads are transparently decompressed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["Volume", "NiftiParseError", "read_nifti", "write_nifti"]

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype
DATATYPES = {
    2: np.dtype("<u1"),  # uint8
    4: np.dtype("<i2"),  # int16
    16: np.dtype("<f4"),  # float32
    64: np.dtype("<f8"),  # float64
}

class NiftiParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Volume:
    """A scaled 3-D voxel grid in x-fastest order: voxels[x, y, z]."""

    voxels: np.ndarray  # float64, shape (X, Y, Z)
    datatype: int = 64
    scl_slope: float = 1.0
    scl_inter: float = 0.0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def read_nifti(data: bytes) -> Volume:
    """Parse a single-file NIfTI-1 blob into a Volume.

    Applies value = raw * scl_slope + scl_inter when scl_slope != 0.
    Rejects bad magic, unsupported datatypes and truncated payloads
    without returning a partial volume.
    """
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < HEADER_SIZE:
        raise NiftiParseError(
            f"file too short for a 348-byte header ({len(data)} bytes)", 0
        )
    (sizeof_hdr,) = struct.unpack_from("<i", data, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiParseError(f"sizeof_hdr = {sizeof_hdr}, expected 348", 0)
    magic = data[344:348]
    if magic != MAGIC:
        raise NiftiParseError(f"bad magic {magic!r}, expected {MAGIC!r}", 344)
    dim = struct.unpack_from("<8h", data, 40)
    if dim[0] != 3:
        raise NiftiParseError(f"dim[0] = {dim[0]}, only 3-D volumes supported", 40)
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise NiftiParseError(f"nonpositive dims {(nx, ny, nz)}", 40)
    (datatype,) = struct.unpack_from("<h", data, 70)
    if datatype not in DATATYPES:
        raise NiftiParseError(f"unsupported datatype code {datatype}", 70)
    (bitpix,) = struct.unpack_from("<h", data, 72)
    expected_bits = DATATYPES[datatype].itemsize * 8
    if bitpix != expected_bits:
        raise NiftiParseError(
            f"bitpix {bitpix} inconsistent with datatype {datatype}", 72
        )
    (vox_offset,) = struct.unpack_from("<f", data, 108)
    offset = int(vox_offset) if vox_offset else HEADER_SIZE + 4
    if offset < HEADER_SIZE:
        raise NiftiParseError(f"vox_offset {offset} inside the header", 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", data, 112)

    dt = DATATYPES[datatype]
    n_vox = nx * ny * nz
    end = offset + n_vox * dt.itemsize
    if len(data) < end:
        raise NiftiParseError(
            f"truncated voxel payload: need {end} bytes, have {len(data)}", len(data)
        )
    raw = np.frombuffer(data, dtype=dt, count=n_vox, offset=offset)
    vox = raw.astype(np.float64).reshape((nx, ny, nz), order="F")
    if scl_slope != 0.0:
        vox = vox * float(scl_slope) + float(scl_inter)
    return Volume(
        voxels=vox,
        datatype=datatype,
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
    )


def write_nifti(
    volume: Volume,
    datatype: int | None = None,
    scl_slope: float = 1.0,
    scl_inter: float = 0.0,
) -> bytes:
    """Serialize a Volume to single-file NIfTI-1 bytes.

    The stored raw values are (voxels - scl_inter) / scl_slope so that
    read_nifti(write_nifti(v)) reproduces v.voxels (up to the raw
    datatype's representable values).
    """
    datatype = volume.datatype if datatype is None else datatype
    if datatype not in DATATYPES:
        raise NiftiParseError(f"unsupported datatype code {datatype}")
    dt = DATATYPES[datatype]
    header = bytearray(HEADER_SIZE + 4)  # header + 4 pad bytes, vox_offset 352
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    nx, ny, nz = volume.dims
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, dt.itemsize * 8)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", header, 112, scl_slope, scl_inter)
    header[344:348] = MAGIC
    raw = volume.voxels
    if scl_slope != 0.0:
        raw = (raw - scl_inter) / scl_slope
    if dt.kind in "iu":
        raw = np.rint(raw)
    payload = np.asfortranarray(raw.astype(dt)).tobytes(order="F")
    return bytes(header) + payload
