"""Masked L1 sequence losses on flow fields."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffops import Tensor, abs_, mul, sub, sum_


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.8
    m: int = 4

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


def _arr(f):
    if isinstance(f, Tensor):
        return f
    return Tensor(f.data if hasattr(f, "span") else np.asarray(f, dtype=np.float64))


def masked_l1(pred, target, mask=None):
    """Mean over masked pixels of ``|du| + |dv|``."""
    pred = _arr(pred)
    tgt = target.data if hasattr(target, "span") else np.asarray(target.data if isinstance(target, Tensor) else target)
    if mask is None:
        mask = np.ones(pred.shape[1:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask is empty")
    weight = mask.astype(pred.dtype) / count
    err = abs_(sub(pred, Tensor(np.asarray(tgt, dtype=pred.dtype))))
    return sum_(mul(err, weight))


def loss_l1(per_iter_flows, f_gt, cfg: LossConfig = LossConfig(), mask=None):
    """``sum_j gamma**(m - j) * masked_l1(F_j, F_gt)`` over the ``m`` iterates."""
    m = len(per_iter_flows)
    if m == 0:
        raise ValueError("no iterates to supervise")
    total = None
    for j, f in enumerate(per_iter_flows, start=1):
        term = mul(masked_l1(f, f_gt, mask), cfg.gamma ** (m - j))
        total = term if total is None else total + term
    return total


def loss_l2(f_hat, f_gt, mask=None):
    return masked_l1(f_hat, f_gt, mask)
