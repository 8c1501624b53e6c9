"""Scalar reference implementations used by the acceptance suite.

Plain Python loops, written independently of the vectorized package code.
"""
import math

import numpy as np


def voxel(events_t, events_x, events_y, events_p, bins, span, shape):
    H, W = shape
    out = [[[0.0] * W for _ in range(H)] for _ in range(bins)]
    t0, t1 = span
    for t, x, y, p in zip(events_t, events_x, events_y, events_p):
        ts = (bins - 1) * (t - t0) / (t1 - t0)
        for b in range(bins):
            w = max(0.0, 1.0 - abs(ts - b))
            out[b][int(y)][int(x)] += p * w
    return np.array(out)


def cost(e0, en, y, x, v, u):
    D = e0.shape[0]
    return sum(e0[d, y, x] * en[d, v, u] for d in range(D)) / math.sqrt(D)


def masked_l1(pred, gt, mask):
    tot, cnt = 0.0, 0
    for y in range(gt.shape[1]):
        for x in range(gt.shape[2]):
            if mask[y, x]:
                tot += abs(pred[0, y, x] - gt[0, y, x]) + abs(pred[1, y, x] - gt[1, y, x])
                cnt += 1
    return tot / cnt


def sequence_l1(preds, gt, mask, gamma):
    m = len(preds)
    return sum(gamma ** (m - j) * masked_l1(p, gt, mask) for j, p in enumerate(preds, start=1))


def _splat_one(acc, x, y, vals):
    H, W = len(acc[0]), len(acc[0][0])
    x0, y0 = math.floor(x), math.floor(y)
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < H and 0 <= xx < W and wx * wy > 0:
                for k, v in enumerate(vals):
                    acc[k][yy][xx] += wx * wy * v


def backward_flow(fwd, eps=1e-6):
    _, H, W = fwd.shape
    acc = [[[0.0] * W for _ in range(H)] for _ in range(3)]
    for y in range(H):
        for x in range(W):
            u, v = fwd[0, y, x], fwd[1, y, x]
            _splat_one(acc, x + u, y + v, (-u, -v, 1.0))
    out = np.zeros((2, H, W))
    valid = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            w = acc[2][y][x]
            if w >= eps:
                valid[y, x] = True
                out[0, y, x] = acc[0][y][x] / w
                out[1, y, x] = acc[1][y][x] / w
    return out, valid


def iwe_ltr(ts, xs, ys, t_k, t_end, bwd, shape):
    H, W = shape
    acc = [[[0.0] * W for _ in range(H)]]
    for t, x, y in zip(ts, xs, ys):
        if not t_k <= t <= t_end:
            continue
        a = (t - t_k) / (t_end - t_k)
        _splat_one(acc, x + a * bwd[0, int(y), int(x)], y + a * bwd[1, int(y), int(x)], (1.0,))
    return np.array(acc[0])


def variance(img):
    vals = [v for row in img for v in row]
    mu = sum(vals) / len(vals)
    return sum((v - mu) ** 2 for v in vals) / len(vals)


def fwl_ltr(ts, xs, ys, t_k, t_end, fwd):
    bwd, _ = backward_flow(fwd)
    shape = fwd.shape[1:]
    return variance(iwe_ltr(ts, xs, ys, t_k, t_end, bwd, shape)) / variance(
        iwe_ltr(ts, xs, ys, t_k, t_end, np.zeros_like(fwd), shape))
