"""Minimal NIfTI-1 volume I/O.

Supports single-file ``.nii`` / ``.nii.gz`` volumes: the 348-byte NIfTI-1
header, both endiannesses, the common scalar datatypes, and slope/intercept
scaling. Split ``.hdr``/``.img`` pairs and exotic datatypes are rejected.
Written files are deterministic byte-for-byte (gzip mtime pinned to 0).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import IngestionError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype (without byte order).
_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        if "w" in mode:
            return gzip.GzipFile(filename="", mode=mode, fileobj=open(path, "wb"), mtime=0)
        return gzip.open(path, mode)
    return open(path, mode)


def read_volume(path) -> np.ndarray:
    """Read a NIfTI-1 volume into a numpy array of its stored shape."""
    path = Path(path)
    try:
        with _open(path, "rb") as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}")
    if len(raw) < VOX_OFFSET:
        raise IngestionError(f"{path}: truncated NIfTI header")

    sizeof_hdr = struct.unpack("<i", raw[0:4])[0]
    if sizeof_hdr == HEADER_SIZE:
        bo = "<"
    elif struct.unpack(">i", raw[0:4])[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise IngestionError(f"{path}: not a NIfTI-1 file (bad header size)")

    magic = raw[344:348]
    if magic not in (MAGIC, b"ni1\x00"):
        raise IngestionError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise IngestionError(
            f"{path}: split .hdr/.img pairs are not supported"
        )

    dim = struct.unpack(bo + "8h", raw[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise IngestionError(f"{path}: invalid dimension count {ndim}")
    shape = tuple(dim[1 : 1 + ndim])
    if any(d < 1 for d in shape):
        raise IngestionError(f"{path}: invalid shape {shape}")

    datatype = struct.unpack(bo + "h", raw[70:72])[0]
    if datatype not in _DTYPES:
        raise IngestionError(
            f"{path}: unsupported NIfTI datatype code {datatype}"
        )
    dtype = np.dtype(bo + _DTYPES[datatype])
    vox_offset = int(struct.unpack(bo + "f", raw[108:112])[0])
    scl_slope = struct.unpack(bo + "f", raw[112:116])[0]
    scl_inter = struct.unpack(bo + "f", raw[116:120])[0]

    count = int(np.prod(shape))
    end = vox_offset + count * dtype.itemsize
    if len(raw) < end:
        raise IngestionError(f"{path}: data truncated ({len(raw)} < {end} bytes)")
    data = np.frombuffer(raw[vox_offset:end], dtype=dtype)
    # NIfTI stores the first index fastest.
    vol = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        if scl_slope == 0.0:
            scl_slope = 1.0
        vol = vol.astype(np.float32) * scl_slope + scl_inter
    return np.ascontiguousarray(vol)


def write_volume(path, volume: np.ndarray) -> None:
    """Write a 3-D (or higher) array as a single-file NIfTI-1 volume.

    Integer arrays are stored in the smallest fitting standard type; floats
    as float32 or float64.
    """
    path = Path(path)
    vol = np.asarray(volume)
    if not 1 <= vol.ndim <= 7:
        raise IngestionError(f"cannot write {vol.ndim}-dimensional volume")

    if np.issubdtype(vol.dtype, np.floating):
        out = vol.astype(np.float64 if vol.dtype == np.float64 else np.float32)
        code = 64 if out.dtype == np.float64 else 16
    elif np.issubdtype(vol.dtype, np.integer) or vol.dtype == np.bool_:
        lo, hi = (int(vol.min()), int(vol.max())) if vol.size else (0, 0)
        if 0 <= lo and hi <= 255:
            out, code = vol.astype(np.uint8), 2
        elif -32768 <= lo and hi <= 32767:
            out, code = vol.astype(np.int16), 4
        else:
            out, code = vol.astype(np.int32), 8
    else:
        raise IngestionError(f"unsupported array dtype {vol.dtype}")

    dim = [vol.ndim] + list(vol.shape) + [1] * (7 - vol.ndim)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, out.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *([1.0] * vol.ndim), *([0.0] * (7 - vol.ndim)))
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    struct.pack_into("<h", header, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", header, 280, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, 1.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, 1.0, 0.0)
    header[344:348] = MAGIC

    payload = bytes(header) + b"\x00\x00\x00\x00" + out.tobytes(order="F")
    try:
        with _open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IngestionError(f"cannot write {path}: {exc}")
