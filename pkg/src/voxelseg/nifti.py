"""Minimal NIfTI-1 single-file I/O.

Only the fields this package needs are interpreted: dim, datatype/bitpix and
pixdim from the 348-byte header. Arrays are returned with shape (D, H, W) =
(dim3, dim2, dim1) so that the file's fastest-varying index is the last array
axis, and spacing is (pixdim3, pixdim2, pixdim1) in mm. Files ending in .gz
are transparently (de)compressed. Intensity scaling (scl_slope/scl_inter),
orientation and extensions are ignored.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import ParseError

_HDR_SIZE = 348
_VOX_OFFSET = 352
_MAGIC_SINGLE = b"n+1\x00"

# NIfTI datatype code -> numpy dtype character
_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2"}
_DTYPE_CODES = {"uint8": 2, "int16": 4, "int32": 8, "float32": 16, "float64": 64}


def _open_maybe_gzip(path: str, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path: str):
    """Read a NIfTI-1 volume; returns (data, spacing).

    data has shape (dim3, dim2, dim1); spacing is (pixdim3, pixdim2, pixdim1).
    """
    with _open_maybe_gzip(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HDR_SIZE:
        raise ParseError(f"{path}: file shorter than the 348-byte NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr == 348:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == 348:
        bo = ">"
    else:
        raise ParseError(f"{path}: sizeof_hdr is not 348 in either byte order")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(bo + "f", raw, 108)[0])
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ParseError(f"{path}: bad NIfTI magic {magic!r}")

    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        ndim = 3
    if ndim != 3:
        raise ParseError(f"{path}: expected a 3D volume, header says dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise ParseError(f"{path}: non-positive dimension in {dim[1:4]}")
    if datatype not in _DTYPES:
        raise ParseError(f"{path}: unsupported datatype code {datatype}")
    dt = np.dtype(bo + _DTYPES[datatype])
    count = nx * ny * nz
    if vox_offset < _HDR_SIZE:
        vox_offset = _VOX_OFFSET
    end = vox_offset + count * dt.itemsize
    if len(raw) < end:
        raise ParseError(f"{path}: data truncated ({len(raw)} < {end} bytes)")
    data = np.frombuffer(raw[vox_offset:end], dtype=dt).reshape(nz, ny, nx)
    if bo == ">":
        # native little-endian arrays regardless of the file's byte order
        data = data.astype(dt.newbyteorder("="))
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    if any(s <= 0 for s in spacing):
        # pixdim may legitimately be 0 in sloppy files; fall back to 1 mm.
        spacing = tuple(s if s > 0 else 1.0 for s in spacing)
    return np.ascontiguousarray(data), spacing


def write_nifti(path: str, data: np.ndarray, spacing) -> None:
    """Write (D, H, W) data as a little-endian single-file NIfTI-1 volume."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ParseError(f"write_nifti expects a 3D array, got shape {data.shape}")
    name = data.dtype.name
    if name not in _DTYPE_CODES:
        raise ParseError(f"write_nifti: unsupported dtype {name}")
    dz, dy, dx = data.shape
    sz, sy, sx = (float(s) for s in spacing)

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dx, dy, dz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DTYPE_CODES[name])
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    hdr[344:348] = _MAGIC_SINGLE

    payload = bytes(hdr) + b"\x00" * (_VOX_OFFSET - _HDR_SIZE) \
        + np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes()
    if str(path).endswith(".gz"):
        # fixed mtime so identical volumes compress to identical bytes
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as f:
        f.write(payload)
