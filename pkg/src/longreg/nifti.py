"""Minimal NIfTI-1 reader/writer.

Covers exactly what this package persists: single-file `.nii`/`.nii.gz`
volumes (float32 or uint8) and 4D displacement fields, little-endian,
no extensions. The byte stream is the C-order buffer of the numpy array,
so file dims are the reversed array dims (fastest axis first, per the
NIfTI convention that dim[1] varies fastest).

Gzip output is written with mtime=0 so identical data produces identical
files.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HDR_SIZE = 348
VOX_OFFSET = 352.0
MAGIC = b"n+1\x00"

_DTYPE_CODES = {
    np.dtype(np.uint8): 2,
    np.dtype(np.int16): 4,
    np.dtype(np.float32): 16,
    np.dtype(np.float64): 64,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_header(shape: tuple[int, ...], dtype: np.dtype, spacing: float, descrip: str) -> bytes:
    ndim = len(shape)
    if ndim not in (3, 4):
        raise ValueError(f"only 3D/4D arrays supported, got {ndim}D")
    dim = [ndim] + [1] * 7
    # file dims are reversed array dims so dim[1] is the fastest axis
    for i, s in enumerate(reversed(shape)):
        dim[1 + i] = s
    pixdim = [0.0] + [1.0] * 7
    # spatial axes carry the spacing; a trailing component axis keeps pixdim 1
    n_spatial = 3
    for i in range(n_spatial):
        pixdim[1 + i] = spacing

    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, _DTYPE_CODES[np.dtype(dtype)])
    struct.pack_into("<h", hdr, 72, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, VOX_OFFSET)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<80s", hdr, 148, descrip.encode("ascii", "replace")[:79])
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scaled identity affine
    struct.pack_into("<4f", hdr, 280, spacing, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing, 0.0)
    struct.pack_into("<4s", hdr, 344, MAGIC)
    return bytes(hdr)


def write_nifti(path: str | Path, data: np.ndarray, spacing: float = 1.0, descrip: str = "") -> None:
    """Write a 3D (D,H,W) or 4D (C,D,H,W) array as a NIfTI-1 file."""
    path = Path(path)
    data = np.asarray(data)
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    if data.dtype not in _DTYPE_CODES:
        data = data.astype(np.float32)
    payload = _pack_header(data.shape, data.dtype, spacing, descrip)
    payload += b"\x00" * int(VOX_OFFSET - HDR_SIZE)
    payload += np.ascontiguousarray(data).tobytes()
    if path.suffix == ".gz":
        # empty filename + fixed mtime keep identical data bit-identical
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)


def read_nifti(path: str | Path) -> tuple[np.ndarray, float, str]:
    """Read a NIfTI-1 file written by this package.

    Returns (data, spacing, descrip); data has array order (D,H,W) or
    (C,D,H,W). Raises IOError naming the file for malformed headers.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < HDR_SIZE:
        raise IOError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HDR_SIZE:
        raise IOError(f"{path}: malformed NIfTI header (sizeof_hdr={sizeof_hdr})")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise IOError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise IOError(f"{path}: unsupported dimensionality {ndim}")
    file_shape = dim[1 : 1 + ndim]
    (dtype_code,) = struct.unpack_from("<h", raw, 70)
    if dtype_code not in _CODE_DTYPES:
        raise IOError(f"{path}: unsupported datatype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    descrip = struct.unpack_from("<80s", raw, 148)[0].split(b"\x00", 1)[0].decode("ascii", "replace")

    count = int(np.prod(file_shape))
    start = int(vox_offset)
    expected = start + count * dtype.itemsize
    if len(raw) < expected:
        raise IOError(f"{path}: data truncated (expected {expected} bytes, got {len(raw)})")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = flat.reshape(tuple(reversed(file_shape)))
    return data.copy(), float(pixdim[1]), descrip
