"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, mul, sum_


def grad_check(op, inputs, eps=1e-5, n_samples=40, seed=0, avoid=None):
    """Largest relative error between analytic and central-difference gradients.

    ``op`` maps the list ``inputs`` (Tensors, 64-bit) to a Tensor. The scalar
    probed is ``sum(op(inputs) * R)`` for a fixed random ``R``. For every input
    with ``requires_grad`` up to ``n_samples`` coordinates are perturbed.
    The per-coordinate error is ``|a - n| / max(|a|, |n|, 1e-6 * scale)`` with
    ``scale`` the largest gradient magnitude seen, so exact zeros do not blow up.
    ``avoid(input_index, flat_index)`` may veto coordinates (e.g. kinks).
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs 64-bit inputs")
        t.grad = None
    out = op(inputs)
    proj = rng.standard_normal(out.shape)
    sum_(mul(out, Tensor(proj))).backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    pairs = []
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if avoid is not None:
            idx = np.array([i for i in idx if not avoid(k, i)], dtype=np.int64)
        if idx.size > n_samples:
            idx = rng.choice(idx, size=n_samples, replace=False)
        ana = np.zeros(t.data.size) if analytic[k] is None else analytic[k].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = (op(inputs).data * proj).sum()
            flat[i] = old - eps
            fm = (op(inputs).data * proj).sum()
            flat[i] = old
            pairs.append((ana[i], (fp - fm) / (2 * eps)))
    if not pairs:
        return 0.0
    a = np.array(pairs)
    scale = max(np.abs(a).max(), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a[:, 0]), np.abs(a[:, 1])), 1e-6 * scale)
    return float(np.max(np.abs(a[:, 0] - a[:, 1]) / denom))
