"""Minimal NIfTI-1 reader/writer.

Supports single-file volumes (``.nii`` / ``.nii.gz``) with the scalar
datatypes used by this toolkit. Data is stored in Fortran order per the
format, with axis 0 fastest on disk.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Raised when a file cannot be parsed as NIfTI-1."""


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Read a NIfTI-1 file.

    Returns (data, spacing) where data keeps the on-disk axis order and
    spacing holds one value per data axis, in mm.
    """
    path = Path(path)
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE + 4:
        raise NiftiError(f"{path}: file too short for a NIfTI-1 header")

    end = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        end = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")

    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(end + "8h", raw, 40)
    (datatype,) = struct.unpack_from(end + "h", raw, 70)
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(end + "2f", raw, 112)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid ndim {ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(end)

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else HEADER_SIZE + 4
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    spacing = tuple(float(abs(p)) for p in pixdim[1 : 1 + ndim])
    return np.asarray(data), spacing


def write_nifti(path, data: np.ndarray, spacing=None) -> None:
    """Write ``data`` as a single-file NIfTI-1 volume.

    The array dtype is preserved when representable (uint8/int16/int32/
    float32/float64); anything else is cast to float32.
    """
    path = Path(path)
    data = np.asarray(data)
    if np.dtype(data.dtype) not in _CODES:
        data = data.astype(np.float32)
    code = _CODES[np.dtype(data.dtype)]
    if spacing is None:
        spacing = (1.0,) * data.ndim
    if len(spacing) != data.ndim:
        raise NiftiError("spacing length must match data ndim")

    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    pixdim = [1.0] + [float(s) for s in spacing] + [1.0] * (7 - data.ndim)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    # identity-orientation sform scaled by spacing
    struct.pack_into("<h", hdr, 254, 1)
    sx = [float(spacing[0]), 0.0, 0.0, 0.0]
    sy = [0.0, float(spacing[1]) if data.ndim > 1 else 1.0, 0.0, 0.0]
    sz = [0.0, 0.0, float(spacing[2]) if data.ndim > 2 else 1.0, 0.0]
    struct.pack_into("<4f", hdr, 280, *sx)
    struct.pack_into("<4f", hdr, 296, *sy)
    struct.pack_into("<4f", hdr, 312, *sz)
    hdr[344:348] = MAGIC_SINGLE

    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)
        f.write(np.asfortranarray(data).tobytes(order="F"))
