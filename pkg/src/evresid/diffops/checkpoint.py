"""EVCK checkpoint files: a named table of little-endian float arrays.

Layout::

    b"EVCK"  u32 version  u32 count
    count x { u16 name_len, name (utf-8), u8 dtype (0=f32, 1=f64), u8 ndim,
              u32 dims[ndim], raw data (C order) }
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EVCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f4": 0, "f8": 1}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(arrays, dtype="f4") -> bytes:
    code = _CODES[np.dtype(dtype).str[1:]]
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype=_DTYPES[code])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> dict:
    if raw[:4] != MAGIC:
        raise CheckpointError("not an EVCK checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        a = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape).copy()
        off += n * dt.itemsize
        out[name] = a
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes")
    return out


def save_checkpoint(path, arrays, dtype="f4"):
    Path(path).write_bytes(encode_checkpoint(arrays, dtype))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())
