"""Flow and velocity fields, and the conversions between them.

A velocity is the average displacement per LTR interval: the flow from ``T_k``
to ``T_k + n*dt`` divided by ``n/N``. Conversions accept numpy arrays,
``FlowField``/``VelocityField`` or autodiff Tensors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..diffops import Tensor, mul


@dataclass(frozen=True)
class FlowField:
    data: np.ndarray  # (2, H, W) pixels over ``span``
    span: tuple  # (t_a, t_b) microseconds
    valid: Optional[np.ndarray] = None  # (H, W) bool, None means all valid

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError(f"flow data must be (2, H, W), got {self.data.shape}")
        if self.span[1] < self.span[0]:
            raise ValueError("flow span must have t_b >= t_a")

    @property
    def shape(self):
        return self.data.shape[1:]

    def mask(self):
        if self.valid is None:
            return np.ones(self.shape, dtype=bool)
        return self.valid


@dataclass(frozen=True)
class VelocityField:
    data: np.ndarray  # (2, H, W) pixels per unit time
    unit: int  # unit time, microseconds (T_k1 - T_k)


def _scale(x, factor):
    if isinstance(x, Tensor):
        return mul(x, factor)
    return np.asarray(x) * factor


def _n_and_N(n, plan):
    N = plan if isinstance(plan, (int, np.integer)) else plan.N
    if not 0 < n <= N:
        raise ValueError(f"timestamp index n={n} outside (0, {N}]")
    return n, N


def temporal_linear_flows(flow, plan):
    """Linear intermediate flows ``F_n = (n*dt / (T_k1 - T_k)) * F`` for ``n = 1..N``."""
    N = plan if isinstance(plan, (int, np.integer)) else plan.N
    data = flow.data if isinstance(flow, FlowField) else flow
    out = [_scale(data, n / N) for n in range(1, N + 1)]
    if isinstance(flow, FlowField):
        t_a, t_b = flow.span
        step = (t_b - t_a) // N
        return [FlowField(d, (t_a, t_a + n * step)) for n, d in enumerate(out, start=1)]
    return out


def flow_to_velocity(flow, n, plan):
    """Average velocity over ``[T_k, T_k + n*dt]``: the flow scaled by ``N/n``."""
    n, N = _n_and_N(n, plan)
    if isinstance(flow, FlowField):
        return VelocityField(_scale(flow.data, N / n), flow.span[1] - flow.span[0] if n == N else
                             int(round((flow.span[1] - flow.span[0]) * N / n)))
    return _scale(flow, N / n)


def velocity_to_flow(velocity, n, plan):
    """Inverse of :func:`flow_to_velocity`: scale by ``n/N``."""
    n, N = _n_and_N(n, plan)
    if isinstance(velocity, VelocityField):
        step = velocity.unit // N
        return FlowField(_scale(velocity.data, n / N), (0, int(round(n * step))) if step else (0, 1))
    return _scale(velocity, n / N)
