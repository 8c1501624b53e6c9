"""Event streams: data model, EVS1 file I/O, temporal splitting and voxelization."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels

EVS_MAGIC = b"EVS1"
EVS_HEADER = struct.Struct("<4sIIQ")
EVS_RECORD = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])
assert EVS_RECORD.itemsize == 16


class EventFormatError(ValueError):
    """Malformed event file; ``offset`` is the byte position of the first bad field."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CoverageError(ValueError):
    pass


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


class EventStream:
    """Time-ordered polarity events at a fixed sensor resolution.

    ``span`` optionally declares the time range the stream was recorded over;
    it is what :func:`split_segments` checks coverage against. Streams read
    from disk carry no span.
    """

    __slots__ = ("resolution", "t", "x", "y", "p", "span")

    def __init__(self, resolution, t=(), x=(), y=(), p=(), span=None, validate=True):
        self.resolution = (int(resolution[0]), int(resolution[1]))
        self.t = _frozen(t, np.int64)
        self.x = _frozen(x, np.int64)
        self.y = _frozen(y, np.int64)
        self.p = _frozen(p, np.int8)
        self.span = None if span is None else (int(span[0]), int(span[1]))
        if validate:
            self.validate()

    @classmethod
    def from_events(cls, resolution, events, span=None):
        ev = list(events)
        cols = list(zip(*ev)) if ev else ([], [], [], [])
        return cls(resolution, *cols, span=span)

    def validate(self):
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise ValueError("event columns differ in length")
        w, h = self.resolution
        if n:
            if not np.all((self.p == 1) | (self.p == -1)):
                raise ValueError("polarity must be -1 or +1")
            if self.x.min() < 0 or self.x.max() >= w or self.y.min() < 0 or self.y.max() >= h:
                raise ValueError(f"coordinates outside {w}x{h}")
            if np.any(np.diff(self.t) < 0):
                raise ValueError("timestamps must be non-decreasing")

    def __len__(self):
        return int(self.t.size)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self):
        return f"EventStream({self.resolution[0]}x{self.resolution[1]}, {len(self)} events)"

    def select(self, mask, span=None):
        return EventStream(self.resolution, self.t[mask], self.x[mask], self.y[mask], self.p[mask],
                           span=span, validate=False)

    def window(self, t_start, t_end, closed=False):
        """Events with ``t_start <= t < t_end`` (``<=`` at the end when ``closed``)."""
        lo = np.searchsorted(self.t, t_start, side="left")
        hi = np.searchsorted(self.t, t_end, side="right" if closed else "left")
        sl = slice(lo, hi)
        return EventStream(self.resolution, self.t[sl], self.x[sl], self.y[sl], self.p[sl],
                           span=(t_start, t_end), validate=False)


@dataclass(frozen=True)
class SegmentPlan:
    """Reference/target split of one LTR interval ``[T_k, T_k1]`` into ``N`` targets."""

    T_k: int
    T_k1: int
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        length = self.T_k1 - self.T_k
        if length <= 0:
            raise ValueError("T_k1 must be greater than T_k")
        if length % self.N:
            raise ValueError(f"interval {length} us is not divisible by N={self.N}")

    @property
    def delta_t(self):
        return (self.T_k1 - self.T_k) // self.N

    @property
    def duration(self):
        return self.T_k1 - self.T_k

    def reference_span(self):
        return (self.T_k - self.delta_t, self.T_k)

    def target_span(self, n):
        """Span of target ``n`` (1-indexed)."""
        return (self.T_k + (n - 1) * self.delta_t, self.T_k + n * self.delta_t)

    def timestamp(self, n):
        return self.T_k + n * self.delta_t


@dataclass(frozen=True)
class VoxelGrid:
    data: np.ndarray
    span: tuple

    @property
    def bins(self):
        return self.data.shape[0]


def load_events(path) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < EVS_HEADER.size:
        raise EventFormatError("truncated header", len(raw))
    magic, width, height, count = EVS_HEADER.unpack_from(raw, 0)
    if magic != EVS_MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", 0)
    if width == 0 or height == 0 or width > 65536 or height > 65536:
        raise EventFormatError(f"bad resolution {width}x{height}", 4)
    expected = EVS_HEADER.size + count * EVS_RECORD.itemsize
    if len(raw) != expected:
        raise EventFormatError(f"expected {expected} bytes for {count} events, found {len(raw)}",
                               min(len(raw), expected))
    rec = np.frombuffer(raw, dtype=EVS_RECORD, count=count, offset=EVS_HEADER.size)

    def where(bad, field_offset):
        i = int(np.argmax(bad))
        return EVS_HEADER.size + i * EVS_RECORD.itemsize + field_offset

    bad = (rec["p"] != 1) & (rec["p"] != -1)
    if bad.any():
        raise EventFormatError("polarity must be -1 or +1", where(bad, 12))
    bad = rec["x"] >= width
    if bad.any():
        raise EventFormatError("x out of bounds", where(bad, 8))
    bad = rec["y"] >= height
    if bad.any():
        raise EventFormatError("y out of bounds", where(bad, 10))
    if count > 1:
        bad = np.diff(rec["t"]) < 0
        if bad.any():
            i = int(np.argmax(bad)) + 1
            raise EventFormatError("timestamps decrease", EVS_HEADER.size + i * EVS_RECORD.itemsize)
    return EventStream((width, height), rec["t"], rec["x"], rec["y"], rec["p"], validate=False)


def save_events(stream: EventStream, path) -> None:
    rec = np.zeros(len(stream), dtype=EVS_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    w, h = stream.resolution
    with open(path, "wb") as fh:
        fh.write(EVS_HEADER.pack(EVS_MAGIC, w, h, len(stream)))
        fh.write(rec.tobytes())


def split_segments(stream: EventStream, plan: SegmentPlan):
    """Cut ``stream`` into the reference segment and ``plan.N`` target segments.

    Intervals are half-open ``[start, end)`` except the last target, which also
    takes events stamped exactly ``T_k1``.
    """
    ref_start = plan.T_k - plan.delta_t
    if stream.span is not None and (stream.span[0] > ref_start or stream.span[1] < plan.T_k1):
        raise CoverageError(
            f"stream spans {stream.span}, plan needs [{ref_start}, {plan.T_k1}]")
    reference = stream.window(ref_start, plan.T_k)
    targets = []
    for n in range(1, plan.N + 1):
        a, b = plan.target_span(n)
        targets.append(stream.window(a, b, closed=(n == plan.N)))
    return reference, targets


def normalized_times(t, bins, span, time_norm="span"):
    """Map timestamps onto ``[0, bins-1]``.

    ``time_norm="span"`` uses the segment endpoints; ``"events"`` uses the first
    and last event, the classic convention.
    """
    t = np.asarray(t, dtype=np.float64)
    if time_norm == "span":
        t0, t1 = float(span[0]), float(span[1])
    elif time_norm == "events":
        if t.size == 0:
            return t
        t0, t1 = float(t[0]), float(t[-1])
        if t1 == t0:
            return np.zeros_like(t)
    else:
        raise ValueError(f"unknown time_norm {time_norm!r}")
    return (bins - 1) * (t - t0) / (t1 - t0)


def voxelize_arrays(t, x, y, p, bins, span, shape, time_norm="span"):
    """Voxelize raw event columns; coordinates may be real-valued."""
    height, width = shape
    tstar = normalized_times(t, bins, span, time_norm)
    return kernels.voxel_scatter(x, y, tstar, p, bins, height, width)


def voxelize(segment: EventStream, bins: int = 2, span=None, time_norm="span") -> VoxelGrid:
    if span is None:
        if segment.span is None:
            raise ValueError("span required for a stream without a declared span")
        span = segment.span
    if span[1] <= span[0]:
        raise ValueError("span must have t_end > t_start")
    w, h = segment.resolution
    data = voxelize_arrays(segment.t, segment.x, segment.y, segment.p, bins, span, (h, w), time_norm)
    return VoxelGrid(data, (int(span[0]), int(span[1])))


def voxelize_plan(stream: EventStream, plan: SegmentPlan, bins: int = 2, time_norm="span"):
    """Reference plus target voxel grids as one ``(N+1, bins, H, W)`` array."""
    reference, targets = split_segments(stream, plan)
    grids = [voxelize(reference, bins, plan.reference_span(), time_norm)]
    for n, seg in enumerate(targets, start=1):
        grids.append(voxelize(seg, bins, plan.target_span(n), time_norm))
    return np.stack([g.data for g in grids])


def window_voxel(stream: EventStream, t_start, t_end, bins=2, time_norm="span"):
    seg = stream.window(t_start, t_end)
    return voxelize(seg, bins, (t_start, t_end), time_norm).data

