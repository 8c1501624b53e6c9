"""Model hyperparameters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    bins: int = 2  # voxel bins per segment
    N: int = 5  # target segments per LTR interval
    D: int = 64  # feature channels
    r: int = 4  # feature downsampling factor (power of two)
    r_l: int = 3  # lookup radius
    levels: int = 2  # cost-volume pyramid levels
    J: int = 6  # global-stage iterations
    m: int = 4  # residual-refiner iterations
    hidden_dim: int = 64
    context_dim: int = 64
    motion_dim: int = 64
    convex_upsample: bool = False
    velocity: bool = True  # refine in the velocity domain; False refines flow directly
    feature_norm: bool = True  # per-channel instance normalization inside the feature encoder
    detach_lookup: bool = True  # stop gradients through lookup coordinates (iterative-refinement convention)
    soft_argmax: bool = True  # append the expected window offset per level to the lookup
    seed: int = 0

    def __post_init__(self):
        if self.r < 1 or self.r & (self.r - 1):
            raise ValueError("r must be a power of two")
        for name in ("bins", "N", "D", "hidden_dim", "context_dim", "motion_dim", "levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("J", "m", "r_l"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def window(self):
        return (2 * self.r_l + 1) ** 2

    @property
    def corr_channels(self):
        return self.levels * (self.window + (2 if self.soft_argmax else 0))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise KeyError(f"unknown model config keys: {bad}")
        return cls(**d)


# small enough to train the acceptance suite on one CPU core in minutes
DESK = ModelConfig(D=32, hidden_dim=32, context_dim=32, motion_dim=32, J=4)
