"""Adaptive-moment optimizer with bias correction and frozen-parameter skip."""
from __future__ import annotations

import numpy as np


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.trainable and p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.trainable and p.grad is not None:
                p.grad = p.grad * scale
    return total


def optimizer_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update, in place on ``p.data``.

    ``grads`` lines up with ``params`` (``None`` entries are skipped, as are
    frozen parameters). ``state`` is a dict owned by the caller; it holds the
    step counter and first/second moments keyed by parameter name.
    """
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if g is None or not p.trainable:
            continue
        key = p.name or str(id(p))
        if weight_decay:
            g = g + weight_decay * p.data
        m = m_all.get(key)
        v = v_all.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_all[key], v_all[key] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, clip=None, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip = clip
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, lr=None):
        norm = clip_grad_norm(self.params, self.clip) if self.clip else None
        optimizer_step(self.params, [p.grad for p in self.params], self.state,
                       self.lr if lr is None else lr, self.betas[0], self.betas[1], self.eps,
                       self.weight_decay)
        return norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """Flatten the moment buffers for checkpointing."""
        out = {"adam.step": np.array([float(self.state.get("step", 0))])}
        for k, m in self.state.get("m", {}).items():
            out[f"adam.m.{k}"] = m
        for k, v in self.state.get("v", {}).items():
            out[f"adam.v.{k}"] = v
        return out

    def load_state_arrays(self, arrays):
        step = arrays.get("adam.step")
        self.state = {"step": int(step[0]) if step is not None else 0, "m": {}, "v": {}}
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                self.state["m"][k[len("adam.m."):]] = np.array(a, dtype=np.float64)
            elif k.startswith("adam.v."):
                self.state["v"][k[len("adam.v."):]] = np.array(a, dtype=np.float64)
