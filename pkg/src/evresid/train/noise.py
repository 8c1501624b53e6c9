"""Perturbations injected into the refiner's initial estimate during training.

Regional noise is low-resolution Gaussian noise upsampled by a factor ``S``:
neighbouring pixels move together, which resembles the smooth, object-shaped
errors of a linearly interpolated flow. White noise is the uncorrelated
baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..diffops import Tensor, add
from ..diffops.nn import upsample_matrix


@dataclass(frozen=True)
class NoiseSpec:
    pattern: str = "regional"  # regional | white | none
    S: int = 6
    weight: float = 0.3
    p_inject: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("regional", "white", "none"):
            raise ValueError(f"unknown noise pattern {self.pattern!r}")
        if int(self.S) != self.S or self.S < 1:
            raise ValueError("S must be an integer >= 1")
        if not 0.0 <= self.p_inject <= 1.0:
            raise ValueError("p_inject must lie in [0, 1]")
        if self.weight < 0:
            raise ValueError("noise weight must be >= 0")


def make_regional_noise(H, W, S, rng):
    """``(2, H, W)`` field: a ``(ceil(H/S), ceil(W/S), 2)`` standard normal grid upsampled by ``S``."""
    S = int(S)
    h, w = math.ceil(H / S), math.ceil(W / S)
    g = np.asarray(rng.standard_normal((h, w, 2)), dtype=np.float64).transpose(2, 0, 1)
    if S == 1:
        return np.ascontiguousarray(g)
    uh, uw = upsample_matrix(h, S), upsample_matrix(w, S)
    up = np.einsum("ih,chw,jw->cij", uh, g, uw)
    return np.ascontiguousarray(up[:, :H, :W])


def make_white_noise(H, W, rng):
    return np.asarray(rng.standard_normal((2, H, W)), dtype=np.float64)


def make_noise(spec: NoiseSpec, H, W, rng):
    if spec.pattern == "regional":
        return make_regional_noise(H, W, spec.S, rng)
    if spec.pattern == "white":
        return make_white_noise(H, W, rng)
    return np.zeros((2, H, W))


def mean_speed(v):
    d = v.data if isinstance(v, Tensor) else np.asarray(v)
    return float(np.mean(np.sqrt(d[0] ** 2 + d[1] ** 2)))


def inject_noise(v_init, spec: NoiseSpec, rng, training=True):
    """Return ``(v_noisy, injected)``.

    With probability ``p_inject`` adds ``weight * sigma_v * noise`` where
    ``sigma_v`` is the spatial mean speed of ``v_init``. Identity outside
    training, for ``pattern="none"`` and for ``weight=0``.
    """
    if not training or spec.pattern == "none" or spec.p_inject == 0.0:
        return v_init, False
    if rng.random() >= spec.p_inject:
        return v_init, False
    data = v_init.data if isinstance(v_init, Tensor) else np.asarray(v_init)
    _, H, W = data.shape
    pert = spec.weight * mean_speed(data) * make_noise(spec, H, W, rng)
    if isinstance(v_init, Tensor):
        return add(v_init, pert), True
    return data + pert, True
