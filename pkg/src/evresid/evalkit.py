"""Flow metrics and motion compensation.

* :func:`forward_to_backward` turns a forward flow into a backward one by
  splatting each pixel's negated flow at its landing point.
* :func:`render_iwe` warps events back to ``T_k`` and splats them into an
  image of warped events (IWE); :func:`fwl` is the variance of that image
  relative to the unwarped one.
* :func:`epe` / :func:`out3` are endpoint-error statistics over a mask.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .model.fields import FlowField

EPS_WEIGHT = 1e-6


def _data(f):
    if isinstance(f, FlowField):
        return np.asarray(f.data, dtype=np.float64)
    return np.asarray(getattr(f, "data", f), dtype=np.float64)


def _mask(f, shape):
    if isinstance(f, FlowField) and f.valid is not None:
        return f.valid
    return np.ones(shape, dtype=bool)


# ---------------------------------------------------------------------------
# endpoint error


def endpoint_errors(f_hat, f_gt, mask=None):
    a, b = _data(f_hat), _data(f_gt)
    if a.shape != b.shape:
        raise ValueError(f"flow shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        mask = _mask(f_gt, a.shape[1:])
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    d = a - b
    return np.sqrt(d[0] ** 2 + d[1] ** 2)[mask]


def epe(f_hat, f_gt, mask=None):
    """Mean Euclidean endpoint error over ``mask`` (default: the GT validity mask)."""
    return float(np.mean(endpoint_errors(f_hat, f_gt, mask)))


def out3(f_hat, f_gt, mask=None):
    """Percentage of masked pixels whose endpoint error exceeds 3 px."""
    e = endpoint_errors(f_hat, f_gt, mask)
    return float(100.0 * np.count_nonzero(e > 3.0) / e.size)


# ---------------------------------------------------------------------------
# forward -> backward flow


def forward_to_backward(f_fwd, eps=EPS_WEIGHT, margin=0):
    """Backward flow by forward splatting.

    Every source pixel ``x`` lands at ``g(x) = x + F(x)`` and deposits ``-F(x)``
    with bilinear weights; each target pixel takes the weighted average.
    Pixels receiving total weight below ``eps`` are invalid and get zero flow.

    ``margin > 0`` adds a ring of that many pixels of edge-replicated flow
    outside the frame. Its sources are used only for pixels that in-frame
    sources leave uncovered, so content entering across the border gets a
    flow without disturbing collisions inside the frame.
    Returns ``(backward, valid)`` with the same type as the input.
    """
    data = _data(f_fwd)
    _, H, W = data.shape
    acc = _splat_flow(data, 0, H, W)
    if margin:
        ext = np.pad(data, ((0, 0), (margin, margin), (margin, margin)), mode="edge")
        ring = np.ones(ext.shape[1:], dtype=bool)
        ring[margin:margin + H, margin:margin + W] = False
        outer = _splat_flow(ext, margin, H, W, only=ring)
        fill = (acc[2] < eps) & (outer[2] >= eps)
        acc[:, fill] = outer[:, fill]
    weight = acc[2]
    valid = weight >= eps
    bwd = np.zeros((2, H, W))
    bwd[:, valid] = acc[:2, valid] / weight[valid]
    if isinstance(f_fwd, FlowField):
        return FlowField(bwd, f_fwd.span, valid), valid
    return bwd, valid


def _splat_flow(data, offset, H, W, only=None):
    """Splat ``-F`` and unit weights of every (selected) source into an ``H x W`` frame."""
    _, he, we = data.shape
    ys, xs = np.mgrid[0:he, 0:we].astype(np.float64)
    lx = xs + data[0] - offset
    ly = ys + data[1] - offset
    fx, fy = data[0], data[1]
    if only is not None:
        lx, ly, fx, fy = lx[only], ly[only], fx[only], fy[only]
    vals = np.stack([-fx.ravel(), -fy.ravel(), np.ones(fx.size)], axis=1)
    return kernels.splat(lx.ravel(), ly.ravel(), vals, H, W)


def naive_backward(f_fwd):
    """Backward flow approximated as the negated forward flow at the same pixel."""
    return -_data(f_fwd), np.ones(_data(f_fwd).shape[1:], dtype=bool)


def _backward(f, method, margin):
    if method == "propagate":
        b, _ = forward_to_backward(_data(f), margin=margin)
        return b
    if method == "naive":
        return naive_backward(f)[0]
    raise ValueError(f"unknown backward method {method!r}")


# ---------------------------------------------------------------------------
# image of warped events


@dataclass
class IWE:
    image: np.ndarray
    count: int  # events that were warped (inside [T_k, T_k1])
    mode: str
    polarity: str


def _events_in(events, t_a, t_b):
    sel = (events.t >= t_a) & (events.t <= t_b)
    return (events.t[sel].astype(np.float64), events.x[sel].astype(np.float64),
            events.y[sel].astype(np.float64), events.p[sel].astype(np.float64))


def _normalize_flows(flows):
    out = []
    for item in flows:
        if isinstance(item, FlowField):
            out.append((item.span[1], item))
        else:
            t, f = item
            out.append((t, f))
    out.sort(key=lambda p: p[0])
    return out


def render_iwe(events, flows, mode="ltr-linear", t_k=None, polarity="unsigned", method="propagate",
               margin=0, weights=None):
    """Warp events in ``[T_k, T_k1]`` back to ``T_k`` and splat them.

    ``flows`` is a sequence of ``(time, forward flow from T_k to time)``
    (FlowFields carry their own time). ``ltr-linear`` uses only the last
    (LTR) flow, scaled by the event's time fraction. ``htr-piecewise`` blends
    the backward flows of the two timestamps bracketing the event. An empty
    ``flows`` list is an error; pass zero flows for the identity warp.
    """
    flows = _normalize_flows(flows)
    if not flows:
        raise ValueError("render_iwe needs at least one flow")
    H, W = _data(flows[-1][1]).shape[1:]
    if t_k is None:
        f_last = flows[-1][1]
        if not isinstance(f_last, FlowField):
            raise ValueError("t_k is required when flows are plain arrays")
        t_k = f_last.span[0]
    t_end = flows[-1][0]
    t, x, y, p = _events_in(events, t_k, t_end)
    xi, yi = x.astype(np.int64), y.astype(np.int64)
    if mode == "ltr-linear":
        b = _backward(flows[-1][1], method, margin)
        alpha = (t - t_k) / (t_end - t_k)
        dx = alpha * b[0, yi, xi]
        dy = alpha * b[1, yi, xi]
    elif mode == "htr-piecewise":
        times = np.array([t_k] + [tt for tt, _ in flows], dtype=np.float64)
        backs = [np.zeros((2, H, W))] + [_backward(f, method, margin) for _, f in flows]
        seg = np.clip(np.searchsorted(times, t, side="left"), 1, len(times) - 1)
        dx = np.zeros_like(t)
        dy = np.zeros_like(t)
        for i in range(1, len(times)):
            sel = seg == i
            if not sel.any():
                continue
            a = (t[sel] - times[i - 1]) / (times[i] - times[i - 1])
            b0, b1 = backs[i - 1], backs[i]
            dx[sel] = (1 - a) * b0[0, yi[sel], xi[sel]] + a * b1[0, yi[sel], xi[sel]]
            dy[sel] = (1 - a) * b0[1, yi[sel], xi[sel]] + a * b1[1, yi[sel], xi[sel]]
    else:
        raise ValueError(f"unknown IWE mode {mode!r}")
    if polarity == "unsigned":
        vals = np.ones_like(t)
    elif polarity == "signed":
        vals = p.copy()
    else:
        raise ValueError(f"unknown polarity mode {polarity!r}")
    if weights is not None:
        vals = vals * weights
    img = kernels.splat(x + dx, y + dy, vals, H, W)[0]
    return IWE(img, int(t.size), mode, polarity)


def fwl(events, flows, mode="ltr-linear", t_k=None, polarity="unsigned", method="propagate", margin=0):
    """Population variance of the IWE divided by that of the identity warp."""
    flows = _normalize_flows(flows)
    iwe = render_iwe(events, flows, mode, t_k, polarity, method, margin)
    zeros = [(tt, FlowField(np.zeros_like(_data(f)), (t_k if t_k is not None else f.span[0], tt)))
             for tt, f in flows]
    ident = render_iwe(events, zeros, mode, t_k if t_k is not None else zeros[-1][1].span[0], polarity)
    v0 = float(np.var(ident.image))
    if v0 == 0.0:
        raise ValueError("identity IWE has zero variance (no events in the interval)")
    return float(np.var(iwe.image)) / v0


def compare_warp(events, f_fwd, t_k=None, margin="auto"):
    """``(fwl_naive, fwl_propagated)`` for an LTR forward flow.

    With ``margin="auto"`` the propagated flow is computed on a frame
    extended by the largest flow magnitude, so flow entering from outside
    is not lost at the border.
    """
    d = _data(f_fwd)
    if margin == "auto":
        margin = int(np.ceil(np.abs(d).max())) + 1 if d.size else 0
    if t_k is None:
        t_k = f_fwd.span[0]
    t_b = f_fwd.span[1] if isinstance(f_fwd, FlowField) else None
    if t_b is None:
        raise ValueError("compare_warp needs a FlowField with a span")
    flows = [(t_b, f_fwd)]
    return (fwl(events, flows, "ltr-linear", t_k, method="naive"),
            fwl(events, flows, "ltr-linear", t_k, method="propagate", margin=margin))


# ---------------------------------------------------------------------------
# reports and image export


REPORT_COLUMNS = ("sequence", "epe", "out3", "fwl")


@dataclass
class MetricReport:
    epe: float = float("nan")
    out3: float = float("nan")
    fwl: float = float("nan")
    per_sequence: list = field(default_factory=list)

    @classmethod
    def aggregate(cls, rows):
        def mean(key):
            vals = [r[key] for r in rows if r.get(key) is not None and np.isfinite(r[key])]
            return float(np.mean(vals)) if vals else float("nan")
        return cls(mean("epe"), mean("out3"), mean("fwl"), list(rows))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.per_sequence:
                w.writerow([r.get("sequence", "")] + [_cell(r.get(c)) for c in REPORT_COLUMNS[1:]])
            w.writerow(["mean", _cell(self.epe), _cell(self.out3), _cell(self.fwl)])

    def table(self):
        lines = [f"{'sequence':<24}{'EPE':>10}{'%Out':>10}{'FWL':>10}"]
        for r in self.per_sequence + [{"sequence": "mean", "epe": self.epe, "out3": self.out3, "fwl": self.fwl}]:
            lines.append(f"{str(r.get('sequence', '')):<24}" + "".join(
                f"{_cell(r.get(c)) or '-':>10}" for c in REPORT_COLUMNS[1:]))
        return "\n".join(lines)


def _cell(v):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return f"{v:.4f}"


def write_png16(path, image):
    """Save an image linearly rescaled to the full 16-bit range."""
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    arr = np.round(scaled * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def write_raw(path, image):
    """Raw little-endian float32, row-major; the shape travels separately."""
    Path(path).write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())
