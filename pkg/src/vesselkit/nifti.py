"""Minimal NIfTI-1 single-file I/O (.nii / .nii.gz).

Little-endian NIfTI-1 only: 348-byte header, magic "n+1\\0", voxel data
immediately after the 4-byte extension flag. Scalar volumes are written as
float32; uint8, int16, float32 and float64 are accepted on read. The qform
and sform fields are parsed but only the voxel spacing is consumed.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ShapeError, TruncatedFileError
from .volume import BinaryMask, Volume

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

_HEADER_FMT = "<i10s18sih2B8h3f4h8f3fh2B4f2i80s24s2h6f12f16s4s"
assert struct.calcsize(_HEADER_FMT) == HEADER_SIZE

# NIfTI datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),   # uint8
    4: np.dtype("<i2"),   # int16
    16: np.dtype("<f4"),  # float32
    64: np.dtype("<f8"),  # float64
}

_GZIP_MAGIC = b"\x1f\x8b"


def _open_read(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == _GZIP_MAGIC:
        return gzip.open(path, "rb")
    return open(path, "rb")


def _open_write(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "wb")
    return open(path, "wb")


def read_nifti(path) -> Volume:
    """Read a 3D scalar NIfTI-1 file into a Volume.

    Raises FileFormatError for unsupported datatypes / wrong magic,
    TruncatedFileError for short files, and ShapeError for non-3D images.
    """
    path = Path(path)
    with _open_read(path) as fh:
        raw = fh.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise TruncatedFileError(f"{path}: {len(raw)} bytes, expected a 348-byte header")
        fields = struct.unpack(_HEADER_FMT, raw)
        sizeof_hdr = fields[0]
        if sizeof_hdr != HEADER_SIZE:
            hint = " (big-endian files are not supported)" if sizeof_hdr == 1543569408 else ""
            raise FileFormatError(f"{path}: sizeof_hdr={sizeof_hdr}, not a little-endian NIfTI-1 file{hint}")
        magic = fields[-1]
        if magic == MAGIC_PAIR:
            raise FileFormatError(f"{path}: two-file NIfTI pairs (.hdr/.img) are not supported")
        if magic != MAGIC_SINGLE:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_SINGLE!r}")

        dim = fields[7:15]
        ndim = dim[0]
        if ndim < 3 or ndim > 7:
            raise ShapeError(f"{path}: dim[0]={ndim}, need a 3D image")
        if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
            raise ShapeError(f"{path}: image is {ndim}D with non-trivial extra dimensions, need 3D")
        nx, ny, nz = (int(d) for d in dim[1:4])
        if nx <= 0 or ny <= 0 or nz <= 0:
            raise ShapeError(f"{path}: non-positive dims {(nx, ny, nz)}")

        datatype = fields[19]
        if datatype not in _DTYPES:
            raise FileFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
        dtype = _DTYPES[datatype]

        pixdim = fields[22:30]
        spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
        vox_offset = int(fields[30])
        scl_slope, scl_inter = float(fields[31]), float(fields[32])

        skip = vox_offset - HEADER_SIZE
        if skip > 0:
            fh.read(skip)
        n = nx * ny * nz
        payload = fh.read(n * dtype.itemsize)
        if len(payload) < n * dtype.itemsize:
            raise TruncatedFileError(
                f"{path}: voxel payload truncated ({len(payload)} of {n * dtype.itemsize} bytes)"
            )

    data = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        if scl_slope != 0.0:
            data = data * scl_slope + scl_inter
    # NIfTI stores x-fastest, which is exactly the Volume flat layout.
    return Volume(dims=(nx, ny, nz), spacing=spacing, data=data)


def write_nifti(volume: Volume, path) -> None:
    """Write a Volume as a float32 single-file NIfTI-1 (.nii or .nii.gz)."""
    path = Path(path)
    nx, ny, nz = volume.dims
    dim = (3, nx, ny, nz, 1, 1, 1, 1)
    pixdim = (1.0,) + volume.spacing + (0.0, 0.0, 0.0, 0.0)
    header = struct.pack(
        _HEADER_FMT,
        HEADER_SIZE,       # sizeof_hdr
        b"", b"",          # data_type, db_name (unused legacy)
        0, 0,              # extents, session_error
        ord("r"), 0,       # regular, dim_info
        *dim,
        0.0, 0.0, 0.0,     # intent_p1..3
        0,                 # intent_code
        16,                # datatype: float32
        32,                # bitpix
        0,                 # slice_start
        *pixdim,
        352.0,             # vox_offset
        1.0, 0.0,          # scl_slope, scl_inter
        0,                 # slice_end
        0, 2,              # slice_code, xyzt_units (mm)
        0.0, 0.0,          # cal_max, cal_min
        0.0, 0.0,          # slice_duration, toffset
        0, 0,              # glmax, glmin
        b"vesselkit", b"",  # descrip, aux_file
        0, 0,              # qform_code, sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,   # quaternion + offsets
        *([0.0] * 12),     # srow_x/y/z
        b"",               # intent_name
        MAGIC_SINGLE,
    )
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    with _open_write(path) as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(payload)


def read_mask(path, threshold: float = 0.5) -> BinaryMask:
    """Read a NIfTI file and binarize it (value > threshold -> 1)."""
    vol = read_nifti(path)
    return BinaryMask(dims=vol.dims, data=(vol.data > threshold).astype(np.uint8))


def write_mask(mask: BinaryMask, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a BinaryMask as a float32 0/1 NIfTI volume."""
    vol = Volume(dims=mask.dims, spacing=spacing, data=mask.data.astype(np.float32))
    write_nifti(vol, path)
