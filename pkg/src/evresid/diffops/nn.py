"""Array ops for dense prediction, each with an analytic backward pass.

All spatial tensors are channel-first ``(C, H, W)`` without a batch axis.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import kernels
from .tensor import Tensor, concat, make, mul, sigmoid, sub, add, tanh


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, kh, kw, stride, padding, pad_mode="zeros"):
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)),
                   mode="edge" if pad_mode == "edge" else "constant")
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def _fold_edge(gxp, p):
    """Adjoint of edge padding: pile the halo gradient onto the border rows/columns."""
    gxp = gxp.copy()
    gxp[:, p, :] += gxp[:, :p, :].sum(axis=1)
    gxp[:, -p - 1, :] += gxp[:, -p:, :].sum(axis=1)
    gxp[:, :, p] += gxp[:, :, :p].sum(axis=2)
    gxp[:, :, -p - 1] += gxp[:, :, -p:].sum(axis=2)
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           pad_mode="zeros") -> Tensor:
    """Cross-correlation of a ``(C_in, H, W)`` input with ``(C_out, C_in, kh, kw)`` weights.

    ``pad_mode`` is ``"zeros"`` or ``"edge"`` (replicate the border).
    """
    c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    wm = weight.data.reshape(co, ci * kh * kw)
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols, ho, wo = x.data.reshape(c, h * w), h, w
    else:
        cols, ho, wo = _im2col(x.data, kh, kw, stride, padding, pad_mode)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(co, ho, wo)

    def back(g):
        g2 = g.reshape(co, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = wm.T @ g2
            if kh == kw == 1 and stride == 1 and padding == 0:
                gx = dcols.reshape(c, h, w)
            else:
                dcols = dcols.reshape(c, kh, kw, ho, wo)
                gxp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
                if padding and pad_mode == "edge":
                    gxp = _fold_edge(gxp, padding)
                gx = gxp[:, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, back)


def instance_norm(x: Tensor, eps=1e-5) -> Tensor:
    """Normalize each channel of ``(C, H, W)`` to zero spatial mean and unit variance."""
    xd = x.data
    mu = xd.mean(axis=(1, 2), keepdims=True)
    sd = np.sqrt(xd.var(axis=(1, 2), keepdims=True) + eps)
    y = (xd - mu) / sd

    def back(g):
        return ((g - g.mean(axis=(1, 2), keepdims=True)
                 - y * (g * y).mean(axis=(1, 2), keepdims=True)) / sd,)

    return make(y, (x,), back)


def avg_pool2d(x: Tensor, k=2) -> Tensor:
    """Average over non-overlapping ``k x k`` windows of the last two axes (floor crop)."""
    *lead, h, w = x.shape
    ho, wo = h // k, w // k
    crop = x.data[..., :ho * k, :wo * k]
    out = crop.reshape(*lead, ho, k, wo, k).mean(axis=(-3, -1))

    def back(g):
        gfull = np.zeros(x.shape, dtype=x.dtype)
        up = np.repeat(np.repeat(g / (k * k), k, axis=-2), k, axis=-1)
        gfull[..., :ho * k, :wo * k] = up
        return (gfull,)

    return make(out, (x,), back)


# ---------------------------------------------------------------------------
# sampling


def gather_maps(maps: Tensor, cx: Tensor, cy: Tensor) -> Tensor:
    """Bilinear sample of map ``i`` at its own ``K`` points; border-clamped.

    ``maps`` is ``(M, H, W)``; ``cx``/``cy`` are ``(M, K)`` pixel coordinates.
    """
    md, xd, yd = maps.data, cx.data, cy.data
    out = kernels.gather_maps(md, xd, yd).astype(md.dtype, copy=False)

    def back(g):
        gm, gx, gy = kernels.gather_maps_backward(
            md, xd, yd, g, need_maps=maps.requires_grad,
            need_coords=cx.requires_grad or cy.requires_grad)
        cast = (lambda a: None if a is None else a.astype(md.dtype, copy=False))
        return cast(gm), cast(gx), cast(gy)

    return make(out, (maps, cx, cy), back)


def bilinear_sample(field: Tensor, coords: Tensor) -> Tensor:
    """Sample a ``(C, H, W)`` field at ``coords`` ``(2, H', W')`` (x first, then y)."""
    c = field.shape[0]
    _, ho, wo = coords.shape
    fd, cd = field.data, coords.data
    cx = np.broadcast_to(cd[0].reshape(1, -1), (c, ho * wo))
    cy = np.broadcast_to(cd[1].reshape(1, -1), (c, ho * wo))
    out = kernels.gather_maps(fd, cx, cy).astype(fd.dtype, copy=False).reshape(c, ho, wo)

    def back(g):
        gm, gx, gy = kernels.gather_maps_backward(
            fd, cx, cy, g.reshape(c, -1), need_maps=field.requires_grad,
            need_coords=coords.requires_grad)
        gc = None
        if coords.requires_grad:
            gc = np.stack([gx.sum(axis=0), gy.sum(axis=0)]).reshape(2, ho, wo).astype(fd.dtype)
        return (None if gm is None else gm.astype(fd.dtype, copy=False)), gc

    return make(out, (field, coords), back)


@lru_cache(maxsize=64)
def upsample_matrix(n, factor):
    """``(n*factor, n)`` interpolation matrix, half-pixel centres (align_corners=False).

    Output index ``i`` reads source position ``(i + 0.5) / factor - 0.5`` clamped
    to ``[0, n-1]`` and blends its two neighbours linearly.
    """
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    factor = int(factor)
    if factor < 1:
        raise ValueError("upsampling factor must be >= 1")
    if factor == 1:
        return make(x.data.copy(), (x,), lambda g: (g,))
    c, h, w = x.shape
    uh = upsample_matrix(h, factor).astype(x.dtype, copy=False)
    uw = upsample_matrix(w, factor).astype(x.dtype, copy=False)
    out = np.einsum("ih,chw,jw->cij", uh, x.data, uw, optimize=True)
    return make(out, (x,), lambda g: (np.einsum("ih,cij,jw->chw", uh, g, uw, optimize=True),))


def convex_upsample(flow: Tensor, mask: Tensor, factor: int) -> Tensor:
    """Upsample ``(2, h, w)`` flow as a softmax-weighted blend of each 3x3 neighbourhood.

    ``mask`` holds ``9 * factor**2`` logits per coarse pixel. Values are scaled
    by ``factor`` so the result is in fine-grid pixels.
    """
    r = int(factor)
    c, h, w = flow.shape
    logits = mask.data.reshape(9, r, r, h, w)
    s = np.exp(logits - logits.max(axis=0, keepdims=True))
    s /= s.sum(axis=0, keepdims=True)
    fp = np.pad(r * flow.data, ((0, 0), (1, 1), (1, 1)), mode="constant")
    u = np.stack([fp[:, i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=1)  # (c, 9, h, w)
    out = np.einsum("kabyx,ckyx->cabyx", s, u)
    out_img = out.transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)

    def back(g):
        go = g.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3)  # (c, r, r, h, w)
        gmask = gflow = None
        if mask.requires_grad:
            ds = np.einsum("cabyx,ckyx->kabyx", go, u)
            gmask = (s * (ds - (s * ds).sum(axis=0, keepdims=True))).reshape(mask.shape)
        if flow.requires_grad:
            du = np.einsum("kabyx,cabyx->ckyx", s, go)
            gfp = np.zeros((c, h + 2, w + 2), dtype=flow.dtype)
            k = 0
            for i in range(3):
                for j in range(3):
                    gfp[:, i:i + h, j:j + w] += du[:, k]
                    k += 1
            gflow = r * gfp[:, 1:-1, 1:-1]
        return gflow, gmask

    return make(out_img, (flow, mask), back)


# ---------------------------------------------------------------------------
# recurrent cell


def gru_cell(hidden: Tensor, inp: Tensor, params, pad_mode="zeros") -> Tensor:
    """Convolutional GRU step ``h' = (1 - z) * h + z * q``.

    ``params`` maps ``wz, bz, wr, br, wq, bq`` to convolution weights/biases;
    all three kernels are square with odd size and "same" padding.
    """
    pad = params["wz"].shape[-1] // 2
    hx = concat([hidden, inp], axis=0)
    z = sigmoid(conv2d(hx, params["wz"], params["bz"], padding=pad, pad_mode=pad_mode))
    r = sigmoid(conv2d(hx, params["wr"], params["br"], padding=pad, pad_mode=pad_mode))
    q = tanh(conv2d(concat([mul(r, hidden), inp], axis=0), params["wq"], params["bq"], padding=pad,
                    pad_mode=pad_mode))
    return add(hidden, mul(z, sub(q, hidden)))
