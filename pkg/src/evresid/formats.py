"""Binary containers for flow fields (EVFL) and voxel tensors (EVTN).

EVFL, little-endian::

    b"EVFL"  u32 W  u32 H  i64 t_a_us  i64 t_b_us
    f32 u[H*W]  f32 v[H*W]          (channel-major)

A header is 28 bytes, so a file is ``28 + 8*H*W`` bytes. Invalid pixels of a
ground-truth flow are stored as NaN.

EVTN, little-endian::

    b"EVTN"  u32 count
    count x { u32 rank, u32 shape[rank], i64 t_a_us, i64 t_b_us, f32 data }

For voxelized plans the first tensor is the reference segment and tensor
``n`` is target ``n``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model.fields import FlowField

FLOW_MAGIC = b"EVFL"
FLOW_HEADER = struct.Struct("<4sIIqq")
TENSOR_MAGIC = b"EVTN"


class FormatError(ValueError):
    pass


def encode_flow(data, span) -> bytes:
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[0] != 2:
        raise ValueError("flow must be (2, H, W)")
    _, h, w = data.shape
    return FLOW_HEADER.pack(FLOW_MAGIC, w, h, int(span[0]), int(span[1])) + \
        np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_flow(raw: bytes) -> FlowField:
    if len(raw) < FLOW_HEADER.size:
        raise FormatError("truncated flow header")
    magic, w, h, t_a, t_b = FLOW_HEADER.unpack_from(raw, 0)
    if magic != FLOW_MAGIC:
        raise FormatError(f"bad flow magic {magic!r}")
    if len(raw) != FLOW_HEADER.size + 8 * w * h:
        raise FormatError(f"flow file has {len(raw)} bytes, expected {FLOW_HEADER.size + 8 * w * h}")
    data = np.frombuffer(raw, dtype="<f4", offset=FLOW_HEADER.size).reshape(2, h, w).astype(np.float64)
    valid = np.all(np.isfinite(data), axis=0)
    if valid.all():
        valid = None
    else:
        data = np.where(np.isfinite(data), data, 0.0)
    return FlowField(data, (t_a, t_b), valid)


def write_flow(path, flow, span=None, valid=None):
    """Write a FlowField (or raw ``(2, H, W)`` array with ``span``) as EVFL."""
    if isinstance(flow, FlowField):
        data, span, valid = flow.data, flow.span, flow.valid if valid is None else valid
    else:
        data = np.asarray(flow)
    data = np.array(data, dtype=np.float64, copy=True)
    if valid is not None:
        data[:, ~valid] = np.nan
    Path(path).write_bytes(encode_flow(data, span))


def read_flow(path) -> FlowField:
    return decode_flow(Path(path).read_bytes())


def encode_tensors(items) -> bytes:
    parts = [TENSOR_MAGIC, struct.pack("<I", len(items))]
    for data, span in items:
        a = np.ascontiguousarray(data, dtype="<f4")
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(struct.pack("<qq", int(span[0]), int(span[1])))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_tensors(raw: bytes):
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    out = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        t_a, t_b = struct.unpack_from("<qq", raw, off)
        off += 16
        n = int(np.prod(shape)) if rank else 1
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 4 * n
        out.append((a, (t_a, t_b)))
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes in tensor file")
    return out


def write_tensors(path, items):
    Path(path).write_bytes(encode_tensors(items))


def read_tensors(path):
    return decode_tensors(Path(path).read_bytes())
