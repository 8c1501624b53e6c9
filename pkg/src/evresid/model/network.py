"""Two-stage flow estimator: a global LTR stage and a shared residual refiner.

Shapes: voxels are ``(B, H, W)``; features, cost-volume queries and the flows
handled internally live on the ``(h, w) = (H/r, W/r)`` grid and are measured
in coarse pixels. Public outputs are upsampled to ``(2, H, W)`` in full-res
pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..diffops import (Conv2d, ConvGRU, Module, Tensor, add, avg_pool2d, concat, div, exp, gather_maps, instance_norm,
                       matmul, mul, relu, reshape, split, sub, sum_, tanh, transpose, upsample_bilinear)
from ..diffops.nn import convex_upsample
from .config import ModelConfig


@dataclass
class FeatureMap:
    data: Tensor  # (D, h, w)
    r: int

    @property
    def D(self):
        return self.data.shape[0]


@dataclass
class CostVolumeSet:
    """Per target: the 4-D volume ``(h, w, h, w)`` and its lookup pyramid.

    ``pyramids[n]`` holds one ``(h*w, h_l, w_l)`` tensor per level; level 0
    shares memory with ``volumes[n]``. Keys are target indices ``1..N``;
    extra timestamps may be added under other keys.
    """
    volumes: dict = field(default_factory=dict)
    pyramids: dict = field(default_factory=dict)
    shape: tuple = (0, 0)

    def __len__(self):
        return len(self.volumes)


@dataclass
class RefinerState:
    hidden: Tensor
    context: Tensor


@dataclass
class GlobalOutput:
    flows: list  # coarse flow after every iteration
    hidden: Tensor
    h0: Tensor
    context: Tensor

    @property
    def flow(self):
        return self.flows[-1]


@dataclass
class RefineOutput:
    velocity: Tensor
    iterates: list  # coarse velocity after every iteration
    param_ids: tuple  # identities of the parameter buffers that were read


def _detach(t):
    return Tensor(t.data)


def _soft_argmax(samples, offsets):
    """Softmax-weighted mean of the window ``offsets`` ``(k, 2)`` for each row of ``samples``."""
    peak = Tensor(samples.data.max(axis=1, keepdims=True))
    e = exp(sub(samples, peak))
    p = div(e, sum_(e, axis=1, keepdims=True))
    return matmul(p, Tensor(offsets))


class MotionEncoder(Module):
    """Correlation samples + current flow/velocity -> motion features."""

    def __init__(self, corr_ch, out_dim, rng, pad_mode="edge"):
        half = max(out_dim // 2, 4)
        self.corr = Conv2d(corr_ch, out_dim, 1, rng=rng)
        self.flow = Conv2d(2, half, 3, rng=rng, pad_mode=pad_mode)
        self.comb = Conv2d(out_dim + half, out_dim - 2, 3, rng=rng, pad_mode=pad_mode)

    def __call__(self, corr, flow):
        c = relu(self.corr(corr))
        f = relu(self.flow(flow))
        return concat([relu(self.comb(concat([c, f]))), flow])


class FlowHead(Module):
    def __init__(self, dim, rng, zero_out=False, pad_mode="edge"):
        self.conv1 = Conv2d(dim, dim, 3, rng=rng, pad_mode=pad_mode)
        self.conv2 = Conv2d(dim, 2, 3, rng=rng, gain=0.1, zero=zero_out, pad_mode=pad_mode)

    def __call__(self, h):
        return self.conv2(relu(self.conv1(h)))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        pm = "edge"
        c = cfg.D
        n_down = int(round(math.log2(cfg.r)))
        self.down = []
        cin = cfg.bins
        for _ in range(n_down):
            self.down.append(Conv2d(cin, c, 3, stride=2, rng=rng, pad_mode=pm))
            cin = c
        self.mid = Conv2d(cin, c, 3, rng=rng, pad_mode=pm)
        self.out = Conv2d(c, cfg.D, 1, rng=rng, gain=1.0)
        self.norm = instance_norm if cfg.feature_norm else (lambda t: t)

    def __call__(self, x):
        for conv in self.down:
            x = relu(self.norm(conv(x)))
        return self.norm(self.out(relu(self.norm(self.mid(x)))))


class GlobalStage(Module):
    def __init__(self, cfg: ModelConfig, rng):
        corr_ch = cfg.corr_channels
        md = cfg.motion_dim
        self.motion = MotionEncoder(corr_ch, md, rng)
        self.agg1 = Conv2d(cfg.N * md, md, 1, rng=rng)
        self.agg2 = Conv2d(md, md, 3, rng=rng, pad_mode="edge")
        self.gru = ConvGRU(cfg.hidden_dim, cfg.context_dim + md, rng=rng, pad_mode="edge")
        self.head = FlowHead(cfg.hidden_dim, rng)
        if cfg.convex_upsample:
            self.mask = Conv2d(cfg.hidden_dim, 9 * cfg.r * cfg.r, 1, rng=rng, gain=0.25)


class Refiner(Module):
    """One set of weights applied at every timestamp."""

    def __init__(self, cfg: ModelConfig, rng):
        corr_ch = cfg.corr_channels
        md = cfg.motion_dim
        self.motion = MotionEncoder(corr_ch, md, rng)
        self.gru = ConvGRU(cfg.hidden_dim, cfg.context_dim + md, rng=rng, pad_mode="edge")
        self.head = FlowHead(cfg.hidden_dim, rng, zero_out=True)


class FlowModel(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.context = Conv2d(cfg.D, cfg.hidden_dim + cfg.context_dim, 3, rng=rng, pad_mode="edge")
        self.gstage = GlobalStage(cfg, rng)
        self.refiner = Refiner(cfg, rng)
        self.assign_names()
        self._grid_cache = {}

    # -- parameter groups

    def _stop(self, t):
        """Flow entering a lookup; cut from the graph unless lookup gradients are enabled."""
        return _detach(t) if self.cfg.detach_lookup else t

    def global_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("refiner.")]

    def refiner_parameters(self):
        return self.refiner.parameters()

    # -- features and cost volumes

    def encode(self, voxel) -> FeatureMap:
        data = voxel.data if hasattr(voxel, "span") else voxel
        data = data.data if isinstance(data, Tensor) else np.asarray(data, dtype=self.encoder.mid.weight.dtype)
        if data.ndim != 3 or data.shape[0] != self.cfg.bins:
            raise ValueError(f"expected a ({self.cfg.bins}, H, W) voxel grid, got {data.shape}")
        h, w = data.shape[1:]
        if h % self.cfg.r or w % self.cfg.r:
            raise ValueError(f"voxel size {h}x{w} not divisible by r={self.cfg.r}")
        return FeatureMap(self.encoder(Tensor(data)), self.cfg.r)

    def encode_context(self, e0: FeatureMap):
        hd = self.cfg.hidden_dim
        out = self.context(e0.data)
        h_part, c_part = split(out, [hd, self.cfg.context_dim], axis=0)
        return tanh(h_part), relu(c_part)

    def cost_pyramid(self, e0: FeatureMap, en: FeatureMap):
        d, h, w = e0.data.shape
        a = transpose(reshape(e0.data, (d, h * w)), (1, 0))
        b = reshape(en.data, (d, h * w))
        corr = mul(matmul(a, b), 1.0 / math.sqrt(d))
        level = reshape(corr, (h * w, h, w))
        pyr = [level]
        for _ in range(1, self.cfg.levels):
            level = avg_pool2d(level, 2)
            pyr.append(level)
        return reshape(corr, (h, w, h, w)), pyr

    def build_cost_volumes(self, e0: FeatureMap, targets) -> CostVolumeSet:
        shapes = {t.data.shape for t in targets} | {e0.data.shape}
        if len(shapes) != 1:
            raise ValueError(f"feature maps differ in shape: {shapes}")
        cv = CostVolumeSet(shape=e0.data.shape[1:])
        for n, en in enumerate(targets, start=1):
            cv.volumes[n], cv.pyramids[n] = self.cost_pyramid(e0, en)
        return cv

    def _offsets(self, h, w, level):
        key = (h, w, level)
        if key not in self._grid_cache:
            rl = self.cfg.r_l
            d = np.arange(-rl, rl + 1, dtype=np.float64)
            dy, dx = np.meshgrid(d, d, indexing="ij")
            ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
            s = 2.0 ** level
            # centre-aligned: pooled cell j covers fine pixels [s*j, s*j + s)
            bx = ((xs.reshape(-1, 1) + 0.5) / s - 0.5) + dx.reshape(1, -1)
            by = ((ys.reshape(-1, 1) + 0.5) / s - 0.5) + dy.reshape(1, -1)
            # window offsets in level-0 pixels, for the soft-argmax read-out
            offs = np.stack([dx.ravel(), dy.ravel()], axis=1) * s
            self._grid_cache[key] = (bx, by, offs)
        return self._grid_cache[key]

    def lookup_pyramid(self, pyr, flow):
        """Sample each level around ``x + flow(x)``; returns ``(levels * (2r_l+1)^2, h, w)``."""
        _, h, w = flow.shape
        fx = reshape(flow[0], (h * w, 1))
        fy = reshape(flow[1], (h * w, 1))
        k = self.cfg.window
        out = []
        for level, maps in enumerate(pyr):
            s = 2.0 ** level
            bx, by, offs = self._offsets(h, w, level)
            cx = add(mul(fx, 1.0 / s), bx)
            cy = add(mul(fy, 1.0 / s), by)
            samples = gather_maps(maps, cx, cy)  # (hw, k)
            out.append(reshape(transpose(samples, (1, 0)), (k, h, w)))
            if self.cfg.soft_argmax:
                out.append(reshape(transpose(_soft_argmax(samples, offs), (1, 0)), (2, h, w)))
        return concat(out)

    def lookup(self, cv: CostVolumeSet, n, flow):
        return self.lookup_pyramid(cv.pyramids[n], flow if isinstance(flow, Tensor) else Tensor(flow))

    # -- global stage

    def global_stage(self, cv: CostVolumeSet, context, h0, iters=None) -> GlobalOutput:
        """``iters`` GRU updates from zero flow; with ``iters=0`` the flow stays zero."""
        cfg = self.cfg
        iters = cfg.J if iters is None else iters
        h, w = cv.shape
        flow = Tensor(np.zeros((2, h, w)))
        hidden = h0
        flows = []
        fractions = [n / cfg.N for n in range(1, cfg.N + 1)]
        for _ in range(iters):
            hidden, flow = self._global_update(cv, context, hidden, flow, fractions)
            flows.append(flow)
        if not flows:
            flows.append(flow)
        return GlobalOutput(flows, hidden, h0, context)

    def _global_update(self, cv, context, hidden, flow, fractions, lookup_flows=None):
        """One GRU step. Lookups use ``fractions[n-1] * flow`` unless ``lookup_flows`` is given."""
        gs = self.gstage
        base = self._stop(flow)
        feats = []
        for n in range(1, self.cfg.N + 1):
            fn = mul(base, fractions[n - 1]) if lookup_flows is None else lookup_flows[n - 1]
            corr = self.lookup(cv, n, fn)
            feats.append(gs.motion(corr, fn))
        agg = relu(gs.agg2(relu(gs.agg1(concat(feats)))))
        hidden = gs.gru(hidden, concat([context, agg]))
        return hidden, add(flow, gs.head(hidden))

    # -- residual refiner

    def refine_pyramid(self, pyr, fraction, context, v_init, hidden, iters=None):
        """Run the refiner on one timestamp; ``fraction = n / N`` (may be non-integer n)."""
        cfg = self.cfg
        iters = cfg.m if iters is None else iters
        rf = self.refiner
        v = v_init
        outs = []
        for _ in range(iters):
            vd = self._stop(v)
            if cfg.velocity:
                fn = mul(vd, fraction)
                corr = self.lookup_pyramid(pyr, fn)
                feat = rf.motion(corr, vd)
            else:
                corr = self.lookup_pyramid(pyr, vd)
                feat = rf.motion(corr, vd)
            hidden = rf.gru(hidden, concat([context, feat]))
            v = add(v, rf.head(hidden))
            outs.append(v)
        ids = tuple(id(p) for p in rf.parameters())
        return RefineOutput(v, outs, ids)

    def residual_refine(self, cv: CostVolumeSet, context, n, v_init, hidden, iters=None) -> RefineOutput:
        """Refine the timestamp-``n`` estimate. ``v_init`` is a velocity (or a flow with ``velocity=False``)."""
        if not 0 < n <= self.cfg.N:
            raise ValueError(f"n={n} outside (0, {self.cfg.N}]")
        return self.refine_pyramid(cv.pyramids[n], n / self.cfg.N, context, v_init, hidden, iters)

    def to_flow(self, state, fraction):
        """Coarse refiner state -> coarse flow at the timestamp with ``fraction = n/N``."""
        return mul(state, fraction) if self.cfg.velocity else state

    def initial_state(self, global_flow, fraction):
        """Refiner initialisation from the global LTR flow (velocity equals it for every n)."""
        return global_flow if self.cfg.velocity else mul(global_flow, fraction)

    # -- L2 support: one more global update seeded by refined flows

    def ltr_from_refined(self, cv, gout: GlobalOutput, refined_flows):
        """Extra global update whose lookups use ``refined_flows`` (coarse, one per n)."""
        _, flow = self._global_update(cv, gout.context, gout.hidden, refined_flows[-1],
                                      None, lookup_flows=[self._stop(f) for f in refined_flows])
        return flow

    # -- resolution

    def upsample(self, flow, hidden=None):
        r = self.cfg.r
        if self.cfg.convex_upsample and hidden is not None:
            return convex_upsample(flow, mul(self.gstage.mask(hidden), 0.25), r)
        return mul(upsample_bilinear(flow, r), float(r))

    # -- whole-sample helpers

    def prepare(self, voxels):
        """Encode ``(N+1, B, H, W)`` voxels: returns ``(cost volumes, context, h0)``."""
        voxels = np.asarray(voxels, dtype=self.encoder.mid.weight.dtype)
        if voxels.shape[0] != self.cfg.N + 1:
            raise ValueError(f"expected N+1={self.cfg.N + 1} voxel grids, got {voxels.shape[0]}")
        feats = [self.encode(v) for v in voxels]
        cv = self.build_cost_volumes(feats[0], feats[1:])
        h0, ctx = self.encode_context(feats[0])
        return cv, ctx, h0

    def predict(self, voxels, refine=True):
        """Full forward pass. Returns a dict of full-resolution numpy flows."""
        from ..diffops import no_grad

        cfg = self.cfg
        with no_grad():
            cv, ctx, h0 = self.prepare(voxels)
            g = self.global_stage(cv, ctx, h0)
            gflow = g.flow
            out = {"global": self.upsample(gflow, g.hidden).data, "flows": [], "linear": []}
            for n in range(1, cfg.N + 1):
                frac = n / cfg.N
                out["linear"].append(frac * out["global"])
                if refine:
                    res = self.residual_refine(cv, ctx, n, self.initial_state(gflow, frac), h0)
                    out["flows"].append(self.upsample(self.to_flow(res.velocity, frac)).data)
        return out

    def infer_htr(self, events, plan, q=1, time_norm="span"):
        """Flows from ``plan.T_k`` to ``q * N`` uniform timestamps, without retraining.

        Timestamps that coincide with the ``N`` targets reuse their cost volumes; the others get
        a fresh target window ``[tau - dt, tau)`` that is encoded and correlated on demand.
        Returns ``[(tau, FlowField), ...]`` in time order, full resolution.
        """
        from ..diffops import no_grad
        from ..events import voxelize_plan, window_voxel
        from .fields import FlowField

        if isinstance(q, bool) or not isinstance(q, (int, np.integer)) or q < 1:
            raise ValueError(f"frequency multiplier must be an integer >= 1, got {q!r}")
        cfg = self.cfg
        if plan.N != cfg.N:
            raise ValueError(f"plan has N={plan.N}, model expects {cfg.N}")
        voxels = voxelize_plan(events, plan, cfg.bins, time_norm)
        out = []
        with no_grad():
            cv, ctx, h0 = self.prepare(voxels)
            gflow = self.global_stage(cv, ctx, h0).flow
            e0 = None
            for i in range(1, q * cfg.N + 1):
                # integer microseconds; the fraction uses the rounded time so flow and span agree
                tau = plan.T_k + int(round(i * plan.delta_t / q))
                frac = (tau - plan.T_k) / plan.duration
                if i % q == 0:
                    pyr = cv.pyramids[i // q]
                else:
                    if e0 is None:
                        e0 = self.encode(voxels[0])
                    vox = window_voxel(events, tau - plan.delta_t, tau, cfg.bins, time_norm)
                    pyr = self.cost_pyramid(e0, self.encode(vox))[1]
                res = self.refine_pyramid(pyr, frac, ctx, self.initial_state(gflow, frac), h0)
                flow = self.upsample(self.to_flow(res.velocity, frac)).data
                out.append((tau, FlowField(flow, (plan.T_k, tau))))
        return out

    def refiner_parameter_ids(self, n_values=None):
        """Parameter identities read by the refiner at each timestamp (one shared set)."""
        n_values = range(1, self.cfg.N + 1) if n_values is None else n_values
        h, w = 2, 2
        z = Tensor(np.zeros((2, h, w)))
        ctx = Tensor(np.zeros((self.cfg.context_dim, h, w)))
        hid = Tensor(np.zeros((self.cfg.hidden_dim, h, w)))
        pyr = [Tensor(np.zeros((h * w, max(h >> l, 1), max(w >> l, 1)))) for l in range(self.cfg.levels)]
        from ..diffops import no_grad

        with no_grad():
            return {n: self.refine_pyramid(pyr, n / self.cfg.N, ctx, z, hid, iters=1).param_ids
                    for n in n_values}
