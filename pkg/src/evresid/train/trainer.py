"""Training loops for the global stage and the residual refiner.

Every step draws its randomness from ``default_rng([seed, step])`` so a run
resumed from a checkpoint replays exactly the batches it would have seen.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..diffops import Adam, Tensor, load_checkpoint, mul, no_grad, save_checkpoint
from ..evalkit import epe
from .losses import LossConfig, loss_l1, loss_l2
from .noise import NoiseSpec, inject_noise

LOG_COLUMNS = ("step", "L1", "L2", "total", "epe_val")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-4
    batch: int = 2
    clip: float = 1.0
    seed: int = 0
    flip: bool = True
    crop: tuple | None = None  # (h, w) random training crop, multiples of 8
    invert: bool = False  # randomly negate event polarity (contrast inversion)
    schedule: str = "constant"  # constant | linear-decay
    warmup: int = 0
    val_every: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise KeyError(f"unknown train config keys: {bad}")
        return cls(**d)

    def __post_init__(self):
        if self.crop is not None:
            object.__setattr__(self, "crop", tuple(self.crop))
            if len(self.crop) != 2 or any(int(v) != v or v < 8 or v % 8 for v in self.crop):
                raise ValueError("crop must be (h, w) with positive multiples of 8")

    def lr_at(self, step):
        lr = self.lr
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        if self.schedule == "linear-decay":
            lr *= max(0.0, 1.0 - step / max(self.steps, 1))
        return lr


@dataclass
class TrainResult:
    history: list
    optimizer: Adam
    step: int


# ---------------------------------------------------------------------------
# helpers


def _flip(voxels, flow, mask, fx, fy):
    """Mirror a sample; flow components change sign with their axis."""
    if fx:
        voxels = voxels[..., ::-1]
        flow = flow[..., ::-1] * np.array([-1.0, 1.0])[:, None, None]
        mask = mask[..., ::-1]
    if fy:
        voxels = voxels[..., ::-1, :]
        flow = flow[..., ::-1, :] * np.array([1.0, -1.0])[:, None, None]
        mask = mask[..., ::-1, :]
    return np.ascontiguousarray(voxels), np.ascontiguousarray(flow), np.ascontiguousarray(mask)


def _augment(rng, cfg, voxels, flow, mask):
    """Random flip, crop and polarity inversion of one sample, driven by ``rng``."""
    flip = rng.integers(0, 2, size=2) if cfg.flip else (0, 0)
    voxels, flow, mask = _flip(voxels, flow, mask, *flip)
    if cfg.crop is not None:
        ch, cw = cfg.crop
        h, w = mask.shape
        if ch > h or cw > w:
            raise ValueError(f"crop {cfg.crop} exceeds sample size {(h, w)}")
        y0, x0 = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        win = (slice(y0, y0 + ch), slice(x0, x0 + cw))
        voxels = np.ascontiguousarray(voxels[(..., *win)])
        flow = np.ascontiguousarray(flow[(..., *win)])
        mask = np.ascontiguousarray(mask[win])
    if cfg.invert and rng.random() < 0.5:
        voxels = -voxels
    return voxels, flow, mask


class _GTCache:
    def __init__(self, dataset):
        self.dataset = dataset
        self._cache = {}

    def ltr(self, i):
        if i not in self._cache:
            s = self.dataset[i]
            f = s.gt(s.plan.N)
            self._cache[i] = (np.asarray(f.data, dtype=np.float64), f.mask())
        return self._cache[i]


class _Logger:
    def __init__(self, path, append=False):
        self.path = path
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            exists = append and Path(path).exists()
            self.fh = open(path, "a" if exists else "w", newline="")
            self.writer = csv.writer(self.fh)
            if not exists:
                self.writer.writerow(LOG_COLUMNS)

    def write(self, row):
        if self.fh is not None:
            self.writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _check(value, step):
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at step {step}")


def _batch(rng, n_items, batch):
    return rng.integers(0, n_items, size=batch)


# ---------------------------------------------------------------------------
# global stage


def global_loss(model, voxels, flow_gt, mask, cfg: LossConfig):
    cv, ctx, h0 = model.prepare(voxels)
    g = model.global_stage(cv, ctx, h0)
    ups = [model.upsample(f, g.hidden) for f in g.flows]
    return loss_l1(ups, flow_gt, cfg, mask), g


def train_global(model, dataset, cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
                 log_path=None, val=None, optimizer=None, start_step=0):
    """Train encoder, context and global stage with a decayed sequence loss on the LTR flow."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    for p in model.global_parameters():
        p.set_trainable(True)
    params = model.global_parameters()
    opt = optimizer or Adam(params, lr=cfg.lr, clip=cfg.clip)
    gt = _GTCache(dataset)
    log = _Logger(log_path, append=start_step > 0)
    history = []
    step = start_step
    try:
        for step in range(start_step, cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            opt.zero_grad()
            total = 0.0
            for i in _batch(rng, len(dataset), cfg.batch):
                flow, mask = gt.ltr(int(i))
                vox, flow, mask = _augment(rng, cfg, dataset[int(i)].voxels, flow, mask)
                loss, _ = global_loss(model, vox, flow, mask, loss_cfg)
                _check(loss.item(), step)
                total += loss.item() / cfg.batch
                mul(loss, 1.0 / cfg.batch).backward()
            opt.step(cfg.lr_at(step))
            row = {"step": step, "L1": total, "L2": 0.0, "total": total, "epe_val": None}
            if val is not None and cfg.val_every and (step + 1) % cfg.val_every == 0:
                row["epe_val"] = evaluate_global(model, val)
            history.append(row)
            log.write(row)
        step = cfg.steps
    finally:
        log.close()
    return TrainResult(history, opt, step)


# ---------------------------------------------------------------------------
# residual stage


@dataclass
class _Frozen:
    """Global-stage outputs of one sample, computed once with frozen weights."""
    cv: object
    ctx: Tensor
    h0: Tensor
    gout: object
    target: np.ndarray
    mask: np.ndarray


def _freeze_outputs(model, dataset, self_supervised, gt):
    out = []
    with no_grad():
        for i, s in enumerate(dataset):
            cv, ctx, h0 = model.prepare(s.voxels)
            g = model.global_stage(cv, ctx, h0)
            if self_supervised:
                target = model.upsample(g.flow, g.hidden).data.copy()
                mask = np.ones(target.shape[1:], dtype=bool)
            else:
                target, mask = gt.ltr(i)
            out.append(_Frozen(cv, ctx, h0, g, target, mask))
    return out


def residual_losses(model, fz: _Frozen, noise: NoiseSpec, loss_cfg: LossConfig, rng, training=True):
    """``(L1, L2, injected)`` for one sample, supervising only the n=N output."""
    N = model.cfg.N
    v_init = Tensor(model.initial_state(fz.gout.flow, 1.0).data)
    v_noisy, injected = inject_noise(v_init, noise, rng, training=training)
    res = model.refine_pyramid(fz.cv.pyramids[N], 1.0, fz.ctx, v_noisy, fz.h0, loss_cfg.m)
    flows = [model.upsample(model.to_flow(v, 1.0)) for v in res.iterates] if res.iterates else \
        [model.upsample(model.to_flow(v_noisy, 1.0))]
    l1 = loss_l1(flows, fz.target, loss_cfg, fz.mask)
    f_n = model.to_flow(res.velocity, 1.0)
    lookups = [mul(f_n, n / N) for n in range(1, N + 1)]
    f_hat = model.ltr_from_refined(fz.cv, fz.gout, lookups)
    l2 = loss_l2(model.upsample(f_hat, fz.gout.hidden), fz.target, fz.mask)
    return l1, l2, injected


def train_residual(model, dataset, noise: NoiseSpec = NoiseSpec(), loss_cfg: LossConfig = LossConfig(),
                   cfg: TrainConfig = TrainConfig(), self_supervised=False, log_path=None, val=None,
                   optimizer=None, start_step=0):
    """Train the shared refiner with the global stage frozen.

    Supervision is the LTR flow only: ground truth, or with ``self_supervised``
    the frozen global stage's own LTR output (no ground truth is read).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    for p in model.global_parameters():
        p.set_trainable(False)
    for p in model.refiner_parameters():
        p.set_trainable(True)
    gt = _GTCache(dataset)
    frozen = _freeze_outputs(model, dataset, self_supervised, gt)
    params = model.refiner_parameters()
    opt = optimizer or Adam(params, lr=cfg.lr, clip=cfg.clip)
    log = _Logger(log_path, append=start_step > 0)
    history = []
    step = start_step
    try:
        for step in range(start_step, cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            opt.zero_grad()
            s1 = s2 = 0.0
            for i in _batch(rng, len(dataset), cfg.batch):
                l1, l2, _ = residual_losses(model, frozen[int(i)], noise, loss_cfg, rng)
                total = l1 + l2
                _check(total.item(), step)
                s1 += l1.item() / cfg.batch
                s2 += l2.item() / cfg.batch
                mul(total, 1.0 / cfg.batch).backward()
            opt.step(cfg.lr_at(step))
            row = {"step": step, "L1": s1, "L2": s2, "total": s1 + s2, "epe_val": None}
            if val is not None and cfg.val_every and (step + 1) % cfg.val_every == 0:
                row["epe_val"] = evaluate_htr(model, val)["epe_refined"]
            history.append(row)
            log.write(row)
        step = cfg.steps
    finally:
        log.close()
        for p in model.global_parameters():
            p.set_trainable(True)
    return TrainResult(history, opt, step)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_global(model, dataset):
    """Mean LTR EPE of the global stage over a dataset."""
    errs = []
    for s in dataset:
        out = model.predict(s.voxels, refine=False)
        f = s.gt(s.plan.N)
        errs.append(epe(out["global"], f.data, f.mask()))
    return float(np.mean(errs))


def evaluate_htr(model, dataset, timestamps=None):
    """Mean EPE over intermediate timestamps: refined vs linear interpolation of the global flow."""
    N = model.cfg.N
    ns = list(range(1, N)) if timestamps is None else list(timestamps)
    ref, lin, ltr = [], [], []
    for s in dataset:
        out = model.predict(s.voxels)
        for n in ns:
            f = s.gt(n)
            ref.append(epe(out["flows"][n - 1], f.data, f.mask()))
            lin.append(epe(out["linear"][n - 1], f.data, f.mask()))
        f = s.gt(N)
        ltr.append(epe(out["flows"][N - 1], f.data, f.mask()))
    return {"epe_refined": float(np.mean(ref)), "epe_linear": float(np.mean(lin)),
            "epe_ltr_refined": float(np.mean(ltr))}


# ---------------------------------------------------------------------------
# checkpoints


def save_training_checkpoint(path, model, optimizer=None, step=0, dtype="f8"):
    arrays = dict(model.state_dict())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    arrays["meta.step"] = np.array([float(step)])
    save_checkpoint(path, arrays, dtype=dtype)


def load_training_checkpoint(path, model, optimizer=None):
    """Restore parameters (and optimizer moments if given); returns the saved step."""
    arrays = load_checkpoint(path)
    params = {k: v for k, v in arrays.items() if not k.startswith(("adam.", "meta."))}
    model.load_state_dict(params)
    if optimizer is not None:
        optimizer.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")})
    step = arrays.get("meta.step")
    return int(step[0]) if step is not None else 0


def config_dict(*cfgs):
    out = {}
    for c in cfgs:
        out.update(asdict(c))
    return out
