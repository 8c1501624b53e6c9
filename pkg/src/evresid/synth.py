"""Synthetic event scenes with analytic motion and exact ground-truth flow.

Time inside a scene is measured in *units*: ``u = (t - T_k) / duration`` where
``duration = T_k1 - T_k`` is the LTR interval. A textured layer moves as

    x(u) = x0 + a(x0) * u + b * sin(2*pi*omega*u)

with ``a(x0)`` either a constant 2-vector or an affine map ``M @ [x0, y0, 1]``.
Frames of per-pixel log intensity are sampled every ``duration / 1024`` and an
event fires each time a pixel drifts ``C`` away from its last reference level.

The stream starts ``2 * dt`` before ``T_k`` (``dt = duration / N``): one
``dt`` of warm-up and the reference segment ``[T_k - dt, T_k)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .events import EventStream, SegmentPlan, save_events
from .formats import write_flow
from .model.fields import FlowField

STEPS_PER_UNIT = 1024
VALID_COVER = 0.05  # blob coverage above which a pixel counts as textured
BLOB_CUTOFF = 4.0
BASE_LEVEL = math.log(0.5)


@dataclass(frozen=True)
class MotionModel:
    kind: str = "affine-linear"
    a: tuple = (0.0, 0.0)
    b: tuple = (0.0, 0.0)
    omega: float = 1.0

    def __post_init__(self):
        if self.kind not in ("affine-linear", "affine-plus-sinusoid"):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        a = np.asarray(self.a, dtype=float)
        if a.shape not in ((2,), (2, 3)):
            raise ValueError(f"motion 'a' must be a 2-vector or 2x3 affine map, got shape {a.shape}")
        if np.asarray(self.b, dtype=float).shape != (2,):
            raise ValueError("motion 'b' must be a 2-vector")

    def affine(self):
        """``(A, c)`` with ``a(x0) = A @ x0 + c``."""
        a = np.asarray(self.a, dtype=float)
        if a.shape == (2,):
            return np.zeros((2, 2)), a
        return a[:, :2], a[:, 2]

    def wobble(self, u):
        """Sinusoidal part of the displacement at time ``u``; zero for the linear kind."""
        if self.kind == "affine-linear":
            return np.zeros(2)
        return np.asarray(self.b, dtype=float) * math.sin(2.0 * math.pi * self.omega * u)

    def position(self, x0, y0, u):
        A, c = self.affine()
        s = self.wobble(u)
        vx = A[0, 0] * x0 + A[0, 1] * y0 + c[0]
        vy = A[1, 0] * x0 + A[1, 1] * y0 + c[1]
        return x0 + vx * u + s[0], y0 + vy * u + s[1]

    def origin(self, x, y, u):
        """Invert :meth:`position`: the ``u = 0`` point that sits at ``(x, y)`` at time ``u``."""
        A, c = self.affine()
        s = self.wobble(u)
        rx = x - c[0] * u - s[0]
        ry = y - c[1] * u - s[1]
        m00, m01 = 1.0 + A[0, 0] * u, A[0, 1] * u
        m10, m11 = A[1, 0] * u, 1.0 + A[1, 1] * u
        det = m00 * m11 - m01 * m10
        if abs(det) < 1e-9:
            raise ValueError(f"affine motion is singular at u={u}")
        return (m11 * rx - m01 * ry) / det, (m00 * ry - m10 * rx) / det

    def velocity(self, x0, y0, u):
        """Time derivative of the trajectory, px per unit time."""
        A, c = self.affine()
        vx = A[0, 0] * x0 + A[0, 1] * y0 + c[0]
        vy = A[1, 0] * x0 + A[1, 1] * y0 + c[1]
        if self.kind == "affine-plus-sinusoid":
            k = 2.0 * math.pi * self.omega
            vx = vx + self.b[0] * k * math.cos(k * u)
            vy = vy + self.b[1] * k * math.cos(k * u)
        return vx, vy

    def flow(self, x, y, u1, u2):
        """Displacement of whatever sits at ``(x, y)`` at ``u1`` until ``u2``."""
        x0, y0 = self.origin(x, y, u1)
        x2, y2 = self.position(x0, y0, u2)
        return x2 - x, y2 - y


@dataclass(frozen=True)
class Texture:
    kind: str = "gaussian-blobs"
    count: int = 24  # blobs per frame area
    sigma: float = 5.0
    cell: float = 12.0
    contrast: float = 1.0  # peak log-intensity amplitude

    def __post_init__(self):
        if self.kind not in ("gaussian-blobs", "checkerboard"):
            raise ValueError(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class Layer:
    texture: Texture = field(default_factory=Texture)
    motion: MotionModel = field(default_factory=MotionModel)


@dataclass(frozen=True)
class SceneSpec:
    resolution: tuple = (128, 96)  # (W, H)
    texture: Texture = field(default_factory=Texture)
    motion: MotionModel = field(default_factory=MotionModel)
    C: float = 0.2
    duration: int = 100_000
    seed: int = 0
    n_targets: int = 5
    background: Optional[Layer] = None  # optional layer drawn behind, occluded by the foreground
    noise_rate: float = 0.0  # spurious events per pixel per unit time
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("contrast threshold C must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.n_targets < 1 or self.duration % self.n_targets:
            raise ValueError("duration must split into n_targets equal integer steps")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")

    @property
    def delta_t(self):
        return self.duration // self.n_targets

    def plan(self) -> SegmentPlan:
        t_k = 2 * self.delta_t
        return SegmentPlan(t_k, t_k + self.duration, self.n_targets)

    @property
    def time_range(self):
        """Simulated time span in microseconds."""
        return 0, self.plan().T_k1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key, typ in (("texture", Texture), ("motion", MotionModel)):
            if isinstance(d.get(key), dict):
                d[key] = typ(**_tuples(d[key]))
        bg = d.get("background")
        if isinstance(bg, dict):
            d["background"] = Layer(Texture(**_tuples(bg["texture"])), MotionModel(**_tuples(bg["motion"])))
        if "resolution" in d:
            d["resolution"] = tuple(d["resolution"])
        return cls(**d)


def _tuples(d):
    return {k: (tuple(tuple(r) if isinstance(r, list) else r for r in v) if isinstance(v, list) else v)
            for k, v in d.items()}


# ---------------------------------------------------------------------------
# layer rendering


class _LayerField:
    """A texture frozen in its ``u = 0`` coordinates plus the motion carrying it."""

    def __init__(self, layer: Layer, shape, u_range, rng):
        self.motion = layer.motion
        self.texture = tex = layer.texture
        h, w = shape
        if tex.kind == "gaussian-blobs":
            lo, hi = self._source_box(shape, u_range, margin=3.0 * tex.sigma)
            area = (hi[0] - lo[0]) * (hi[1] - lo[1])
            n = max(1, int(round(tex.count * area / (h * w))))
            self.cx = rng.uniform(lo[0], hi[0], n)
            self.cy = rng.uniform(lo[1], hi[1], n)
            self.amp = rng.choice([-1.0, 1.0], n) * tex.contrast * rng.uniform(0.5, 1.0, n)
        else:
            self.phase = rng.uniform(0.0, tex.cell, 2)

    def _source_box(self, shape, u_range, margin):
        h, w = shape
        xs = np.array([0.0, w - 1.0, 0.0, w - 1.0])
        ys = np.array([0.0, 0.0, h - 1.0, h - 1.0])
        pts = []
        for u in np.linspace(u_range[0], u_range[1], 65):
            ox, oy = self.motion.origin(xs, ys, u)
            pts.append(np.stack([ox, oy]))
        pts = np.concatenate(pts, axis=1)
        return pts.min(axis=1) - margin, pts.max(axis=1) + margin

    def sample(self, x0, y0):
        """``(value, coverage)`` of the texture at source coordinates."""
        tex = self.texture
        if tex.kind == "gaussian-blobs":
            v, c = kernels.render_blobs(x0, y0, self.cx, self.cy, self.amp, tex.sigma, BLOB_CUTOFF)
            return v.reshape(x0.shape), c.reshape(x0.shape)
        k = math.pi / tex.cell
        sx = np.tanh(2.0 * np.sin(k * (x0 + self.phase[0])))
        sy = np.tanh(2.0 * np.sin(k * (y0 + self.phase[1])))
        return tex.contrast * sx * sy / math.tanh(2.0) ** 2, np.ones_like(x0)


class _Scene:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        w, h = spec.resolution
        self.shape = (h, w)
        plan = spec.plan()
        self.t_k = plan.T_k
        u_range = (self.units(0), self.units(plan.T_k1))
        rng = np.random.default_rng(spec.seed)
        self.fg = _LayerField(Layer(spec.texture, spec.motion), self.shape, u_range, rng)
        self.bg = None if spec.background is None else _LayerField(spec.background, self.shape, u_range, rng)
        self.noise_rng = np.random.default_rng([spec.seed, 1])
        self.ys, self.xs = np.mgrid[0:h, 0:w].astype(np.float64)

    def units(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_k) / self.spec.duration

    def _layer_at(self, layer, u):
        x0, y0 = layer.motion.origin(self.xs, self.ys, u)
        return layer.sample(x0, y0)

    def log_intensity(self, u):
        v, cover = self._layer_at(self.fg, u)
        level = BASE_LEVEL + v
        if self.bg is not None:
            alpha = np.clip(cover, 0.0, 1.0)
            vb, _ = self._layer_at(self.bg, u)
            level = level + (1.0 - alpha) * vb
        return level

    def visibility(self, u):
        """Per pixel: True where the foreground layer is the one seen."""
        _, cover = self._layer_at(self.fg, u)
        if self.bg is None:
            return np.ones(self.shape, dtype=bool), cover
        return cover >= 0.5, cover

    def flow(self, u1, u2):
        fx, fy = self.fg.motion.flow(self.xs, self.ys, u1, u2)
        on_fg, cover = self.visibility(u1)
        if self.bg is None:
            valid = cover >= VALID_COVER
            if self.fg.texture.kind == "checkerboard":
                valid = np.ones(self.shape, dtype=bool)
            return np.stack([fx, fy]), valid
        bx, by = self.bg.motion.flow(self.xs, self.ys, u1, u2)
        _, bcover = self._layer_at(self.bg, u1)
        data = np.stack([np.where(on_fg, fx, bx), np.where(on_fg, fy, by)])
        bg_textured = bcover >= VALID_COVER if self.bg.texture.kind == "gaussian-blobs" else np.ones(self.shape, bool)
        valid = np.where(on_fg, True, bg_textured)
        return data, valid


# ---------------------------------------------------------------------------
# public API


class GroundTruthFlow:
    """Dense analytic flow between any two times inside a rendered scene."""

    def __init__(self, spec: SceneSpec):
        self._scene = _Scene(spec)
        self.spec = spec
        self.plan = spec.plan()

    @property
    def time_range(self):
        return self.spec.time_range

    def to_units(self, t):
        return float(self._scene.units(t))

    def flow_units(self, u1, u2):
        """``(data (2, H, W), valid (H, W))`` for unit times ``u1 -> u2``."""
        return self._scene.flow(float(u1), float(u2))

    def at(self, t1, t2) -> FlowField:
        """Flow mapping pixel positions at ``t1`` to ``t2`` (microseconds, ``t1 <= t2``)."""
        lo, hi = self.time_range
        for t in (t1, t2):
            if not lo <= t <= hi:
                raise ValueError(f"time {t} outside the simulated range [{lo}, {hi}]")
        if t2 < t1:
            raise ValueError("gt flow needs t1 <= t2")
        data, valid = self.flow_units(self.to_units(t1), self.to_units(t2))
        return FlowField(data, (int(t1), int(t2)), valid)

    __call__ = at


def gt_flow_at(gt: GroundTruthFlow, t1, t2) -> FlowField:
    return gt.at(t1, t2)


def render_scene(spec: SceneSpec, use_numba=None):
    """Simulate the scene; returns ``(EventStream, GroundTruthFlow)``."""
    gt = GroundTruthFlow(spec)
    scene = gt._scene
    t0, t1 = spec.time_range
    n_steps = int(math.ceil((t1 - t0) * STEPS_PER_UNIT / spec.duration))
    times = np.linspace(t0, t1, n_steps + 1)
    w = spec.resolution[0]

    prev = scene.log_intensity(scene.units(times[0])).ravel()
    ref = prev.copy()
    chunks = []
    for k in range(1, n_steps + 1):
        cur = scene.log_intensity(scene.units(times[k])).ravel()
        pix, tt, pol = kernels.crossings(prev, cur, ref, spec.C, times[k - 1], times[k], use_numba=use_numba)
        if pix.size:
            chunks.append((pix, tt, pol))
        prev = cur

    if chunks:
        pix = np.concatenate([c[0] for c in chunks])
        tt = np.concatenate([c[1] for c in chunks])
        pol = np.concatenate([c[2] for c in chunks])
    else:
        pix, tt, pol = np.empty(0, np.int64), np.empty(0), np.empty(0, np.int8)

    if spec.noise_rate > 0:
        rng = scene.noise_rng
        h = spec.resolution[1]
        n_noise = rng.poisson(spec.noise_rate * w * h * (t1 - t0) / spec.duration)
        pix = np.concatenate([pix, rng.integers(0, w * h, n_noise)])
        tt = np.concatenate([tt, rng.uniform(t0, t1, n_noise)])
        pol = np.concatenate([pol, rng.choice(np.array([-1, 1], np.int8), n_noise)])

    t_int = np.clip(np.rint(tt), t0, t1).astype(np.int64)
    order = np.argsort(t_int, kind="stable")
    pix = pix[order]
    stream = EventStream(spec.resolution, t_int[order], pix % w, pix // w, pol[order], span=(t0, t1))
    if len(stream) == 0:
        warnings.warn(f"scene {spec.name or spec.seed!r} produced no events; texture too flat?", stacklevel=2)
    return stream, gt


def export_dataset(specs, directory, use_numba=None):
    """Write each scene's events and N ground-truth flows plus ``manifest.jsonl``.

    Layout: ``<dir>/<split>/<name>/events.evs`` and ``flow_<n>.evfl`` holding
    the flow from ``T_k`` to ``T_k + n*dt``; invalid pixels are stored as NaN.
    An existing manifest is extended: records with a new scene's name are
    replaced, the others kept in place.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, spec in enumerate(specs):
        name = spec.name or f"scene_{i:04d}"
        sub = root / spec.split / name
        sub.mkdir(parents=True, exist_ok=True)
        stream, gt = render_scene(spec, use_numba=use_numba)
        save_events(stream, sub / "events.evs")
        plan = spec.plan()
        flows = []
        for n in range(1, plan.N + 1):
            path = sub / f"flow_{n}.evfl"
            write_flow(path, gt.at(plan.T_k, plan.timestamp(n)))
            flows.append(str(path.relative_to(root)))
        records.append({
            "name": name, "split": spec.split, "seed": spec.seed,
            "events": str((sub / "events.evs").relative_to(root)), "flows": flows,
            "T_k": plan.T_k, "T_k1": plan.T_k1, "N": plan.N, "n_events": len(stream),
            "spec": spec.to_dict(),
        })
    manifest = root / "manifest.jsonl"
    new = {r["name"] for r in records}
    kept = [r for r in read_manifest(root) if r["name"] not in new] if manifest.exists() else []
    with open(manifest, "w") as fh:
        for rec in kept + records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def read_manifest(directory, split=None):
    path = Path(directory) / "manifest.jsonl"
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if split is None or rec["split"] == split:
                    out.append(rec)
    return out


# ---------------------------------------------------------------------------
# scene families used for training and evaluation


def sample_scene(seed, family="linear", resolution=(128, 96), max_speed=20.0, wobble=6.0,
                 omega=0.5, split="train", n_targets=5, duration=100_000, **overrides) -> SceneSpec:
    """Draw a random scene from a named family.

    ``linear``: translation plus a small affine term. ``sinusoid``: the same
    with an added ``b * sin(2*pi*omega*u)`` wobble of amplitude up to
    ``wobble`` px. ``occlusion``: a translating blob foreground over an
    expanding checkerboard background (camera moving forward).
    """
    rng = np.random.default_rng([seed, 7])
    w, h = resolution
    speed = rng.uniform(0.3, 1.0) * max_speed
    ang = rng.uniform(0, 2 * math.pi)
    c = np.array([speed * math.cos(ang), speed * math.sin(ang)])
    A = rng.uniform(-0.04, 0.04, (2, 2))
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    a = np.concatenate([A, (c - A @ centre)[:, None]], axis=1)
    a = tuple(tuple(float(v) for v in row) for row in a)
    # dense fine texture and a low threshold keep every target segment well populated
    texture = Texture("gaussian-blobs", count=int(rng.integers(40, 70)), sigma=float(rng.uniform(2.5, 4.5)))
    overrides.setdefault("C", 0.1)
    if family == "linear":
        motion = MotionModel("affine-linear", a)
    elif family == "sinusoid":
        amp = rng.uniform(0.5, 1.0) * wobble
        ph = rng.uniform(0, 2 * math.pi)
        motion = MotionModel("affine-plus-sinusoid", a, (float(amp * math.cos(ph)), float(amp * math.sin(ph))), omega)
    elif family == "occlusion":
        # ego-motion-like: an expanding textured background behind a translating foreground
        motion = MotionModel("affine-linear", tuple(float(v) for v in c))
        k = rng.uniform(0.2, 0.35)
        fx, fy = rng.uniform(0.3, 0.7) * (w - 1), rng.uniform(0.3, 0.7) * (h - 1)
        zoom = ((k, 0.0, -k * fx), (0.0, k, -k * fy))
        bg = Layer(Texture("checkerboard", cell=float(rng.uniform(8, 14)), contrast=0.6),
                   MotionModel("affine-linear", zoom))
        overrides.setdefault("background", bg)
        texture = replace(texture, count=max(4, texture.count // 4), sigma=texture.sigma * 1.6)
    else:
        raise ValueError(f"unknown scene family {family!r}")
    return SceneSpec(resolution=tuple(resolution), texture=texture, motion=motion, seed=int(seed),
                     n_targets=n_targets, duration=duration, name=f"{family}_{seed:05d}", split=split,
                     **overrides)
