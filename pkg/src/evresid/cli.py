"""Command-line entry points.

Every command reads an optional JSON run configuration (``--config``) with the
sections below; flags override individual keys. Unknown keys are errors.

    {"model": {...ModelConfig},  "train": {...TrainConfig}, "loss": {"gamma", "m"},
     "noise": {...NoiseSpec},    "synth": {...}, "eval": {...}, "ablate": {...}}

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


def _synth_defaults():
    return {"families": {"linear": 4}, "seed": 0, "split": "train", "resolution": [128, 96],
            "max_speed": 20.0, "wobble": 6.0, "omega": 0.5, "n_targets": 5, "duration": 100_000}


def _eval_defaults():
    return {"mode": "htr-piecewise", "polarity": "unsigned", "method": "propagate", "margin": 0,
            "images": "png"}


def _ablate_defaults():
    return {"patterns": ["none", "white", "regional"], "weights": [0.1, 0.3, 0.5],
            "velocity": [True, False], "self_supervised": True, "val_split": "test"}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    synth: dict = field(default_factory=_synth_defaults)
    eval: dict = field(default_factory=_eval_defaults)
    ablate: dict = field(default_factory=_ablate_defaults)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown config sections: {bad}")
        cfg = cls()
        for name, value in d.items():
            if not isinstance(value, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            base = getattr(cfg, name)
            if name in ("synth", "eval", "ablate"):
                bad = sorted(set(value) - set(base))
                if bad:
                    raise ConfigError(f"unknown {name} config keys: {bad}")
                base = dict(base, **value)
            else:
                base = dict(value)
            setattr(cfg, name, base)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def validate(self):
        self.model_config(), self.train_config(), self.loss_config(), self.noise_spec()

    def _build(self, factory, section):
        try:
            return factory(**getattr(self, section))
        except TypeError as exc:
            known = {f.name for f in fields(factory)}
            bad = sorted(set(getattr(self, section)) - known)
            raise ConfigError(f"unknown {section} config keys: {bad}" if bad else str(exc)) from None
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None

    def model_config(self):
        from .model import ModelConfig
        return self._build(ModelConfig, "model")

    def train_config(self):
        from .train import TrainConfig
        return self._build(TrainConfig, "train")

    def loss_config(self):
        from .train import LossConfig
        return self._build(LossConfig, "loss")

    def noise_spec(self):
        from .train import NoiseSpec
        return self._build(NoiseSpec, "noise")

    def to_dict(self):
        return asdict(self)


def _override(section: dict, **values):
    for k, v in values.items():
        if v is not None:
            section[k] = v


def _config(args):
    cfg = RunConfig.load(getattr(args, "config", None))
    return cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# commands


def _scene_specs(sc):
    from .synth import sample_scene

    specs = []
    seed = int(sc["seed"])
    for family, count in sorted(sc["families"].items()):
        for i in range(int(count)):
            specs.append(sample_scene(seed + i, family, resolution=tuple(sc["resolution"]),
                                      max_speed=sc["max_speed"], wobble=sc["wobble"], omega=sc["omega"],
                                      split=sc["split"], n_targets=sc["n_targets"], duration=sc["duration"]))
    return specs


def cmd_synth(args):
    from .synth import export_dataset

    cfg = _config(args)
    if args.family is not None:
        cfg.synth["families"] = {args.family: args.count if args.count is not None else 4}
    elif args.count is not None:
        cfg.synth["families"] = {k: args.count for k in cfg.synth["families"]}
    _override(cfg.synth, seed=args.seed, split=args.split)
    try:
        specs = _scene_specs(cfg.synth)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None
    export_dataset(specs, args.out)
    print(f"wrote {len(specs)} scenes to {args.out}")


def _plan(args, rec=None):
    from .events import SegmentPlan

    if rec is not None:
        return SegmentPlan(rec["T_k"], rec["T_k1"], rec["N"])
    if args.t_k is None or args.t_k1 is None:
        raise ConfigError("--t-k and --t-k1 are required without a manifest scene")
    return SegmentPlan(args.t_k, args.t_k1, args.N)


def _load_scene(args):
    """``(stream, plan, record)`` from --events/--t-k or --data/--scene."""
    from .events import EventFormatError, load_events
    from .synth import read_manifest

    try:
        if args.data is not None:
            recs = [r for r in read_manifest(args.data) if r["name"] == args.scene]
            if not recs:
                raise DataError(f"scene {args.scene!r} not in {args.data}")
            rec = recs[0]
            return load_events(Path(args.data) / rec["events"]), _plan(args, rec), rec
        if args.events is None:
            raise ConfigError("give --events or --data/--scene")
        return load_events(args.events), _plan(args), None
    except (FileNotFoundError, EventFormatError) as exc:
        raise DataError(str(exc)) from None


def cmd_voxelize(args):
    from .events import voxelize_plan
    from .formats import write_tensors

    stream, plan, _ = _load_scene(args)
    vox = voxelize_plan(stream, plan, bins=args.bins)
    spans = [plan.reference_span()] + [plan.target_span(n) for n in range(1, plan.N + 1)]
    write_tensors(args.out, [(v.astype(np.float32), s) for v, s in zip(vox, spans)])
    print(f"wrote {len(spans)} voxel grids to {args.out}")


def _save_model(path, model, run_cfg, optimizer=None, step=0):
    from .train import save_training_checkpoint

    save_training_checkpoint(path, model, optimizer, step)
    meta = run_cfg.to_dict()
    meta["model"] = model.cfg.to_dict()
    _write_json(str(path) + ".json", meta)


def _load_model(path, run_cfg=None, optimizer_params=None):
    """Model from a checkpoint; its configuration comes from the ``.json`` sidecar when present."""
    from .diffops import CheckpointError
    from .model import FlowModel, ModelConfig
    from .train import load_training_checkpoint

    side = Path(str(path) + ".json")
    if side.exists():
        mcfg = ModelConfig.from_dict(json.loads(side.read_text())["model"])
    else:
        mcfg = (run_cfg or RunConfig()).model_config()
    model = FlowModel(mcfg)
    try:
        step = load_training_checkpoint(path, model)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (CheckpointError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return model, step


def cmd_train(args):
    from .diffops import Adam
    from .model import FlowModel
    from .train import SceneDataset, load_training_checkpoint, train_global, train_residual

    cfg = _config(args)
    _override(cfg.train, steps=args.steps, lr=args.lr, seed=args.seed)
    _override(cfg.noise, pattern=args.noise, weight=args.noise_weight, S=args.noise_s, p_inject=args.noise_prob)
    if args.no_velocity:
        cfg.model["velocity"] = False
    tcfg, lcfg, nspec = cfg.train_config(), cfg.loss_config(), cfg.noise_spec()
    mcfg = cfg.model_config()

    if args.self_supervised and args.stage != "residual":
        raise ConfigError("--self-supervised only applies to --stage residual")
    ds = SceneDataset.from_dir(args.data, split=args.split, bins=mcfg.bins,
                               with_gt=not args.self_supervised)
    if len(ds) == 0:
        raise DataError(f"no scenes in {args.data} (split={args.split})")

    start = 0
    if args.resume:
        model, _ = _load_model(args.resume, cfg)
        if args.no_velocity:
            model.cfg = replace(model.cfg, velocity=False)
    elif args.init:
        model, _ = _load_model(args.init, cfg)
        model.cfg = replace(model.cfg, velocity=mcfg.velocity)
    else:
        model = FlowModel(mcfg)
    params = model.global_parameters() if args.stage == "global" else model.refiner_parameters()
    opt = Adam(params, lr=tcfg.lr, clip=tcfg.clip)
    if args.resume:
        start = load_training_checkpoint(args.resume, model, opt)

    if args.stage == "global":
        res = train_global(model, ds, tcfg, lcfg, log_path=args.log, optimizer=opt, start_step=start)
    else:
        res = train_residual(model, ds, nspec, lcfg, tcfg, self_supervised=args.self_supervised,
                             log_path=args.log, optimizer=opt, start_step=start)
    cfg.model = model.cfg.to_dict()
    _save_model(args.out, model, cfg, res.optimizer, res.step)
    last = res.history[-1]["total"] if res.history else float("nan")
    print(f"{args.stage} stage: {res.step} steps, final loss {last:.4f}, gt reads {ds.audit['gt_reads']}")


def cmd_infer(args):
    from .formats import write_flow

    cfg = _config(args)
    model, _ = _load_model(args.ckpt, cfg)
    stream, plan, _ = _load_scene(args)
    if args.freq < 1:
        raise ConfigError("--freq must be an integer >= 1")
    flows = model.infer_htr(stream, plan, args.freq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (tau, f) in enumerate(flows, start=1):
        if not np.all(np.isfinite(f.data)):
            raise FloatingPointError(f"non-finite flow at t={tau}")
        write_flow(out / f"flow_{i:03d}.evfl", f)
    print(f"wrote {len(flows)} flows to {out}")


def _read_flow_dir(path):
    from .formats import FormatError, read_flow

    files = sorted(Path(path).glob("*.evfl"))
    if not files:
        raise DataError(f"no .evfl files in {path}")
    try:
        flows = [read_flow(f) for f in files]
    except FormatError as exc:
        raise DataError(str(exc)) from None
    return sorted(flows, key=lambda f: f.span[1])


def cmd_eval(args):
    from .evalkit import MetricReport, epe, fwl, out3, render_iwe, write_png16, write_raw
    from .events import EventFormatError, load_events

    cfg = _config(args)
    ev_cfg = cfg.eval
    _override(ev_cfg, mode=args.mode)
    flows = _read_flow_dir(args.flows)
    try:
        stream = load_events(args.events)
    except (FileNotFoundError, EventFormatError) as exc:
        raise DataError(str(exc)) from None
    t_k = flows[0].span[0]
    gt = _read_flow_dir(args.gt) if args.gt else None

    name = args.name or Path(args.flows).name
    row = {"sequence": name, "epe": None, "out3": None, "fwl": None}
    if gt is not None:
        by_t = {f.span[1]: f for f in gt}
        pairs = [(f, by_t[f.span[1]]) for f in flows if f.span[1] in by_t]
        if not pairs:
            raise DataError("no ground-truth flow shares a timestamp with the predictions")
        row["epe"] = float(np.mean([epe(f.data, g.data, g.mask()) for f, g in pairs]))
        row["out3"] = float(np.mean([out3(f.data, g.data, g.mask()) for f, g in pairs]))
    mode = ev_cfg["mode"]
    use = flows if mode == "htr-piecewise" else flows[-1:]
    kw = dict(mode=mode, t_k=t_k, polarity=ev_cfg["polarity"], method=ev_cfg["method"], margin=ev_cfg["margin"])
    row["fwl"] = fwl(stream, use, **kw)
    report = MetricReport.aggregate([row])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    iwe = render_iwe(stream, use, **kw)
    ident = render_iwe(stream, [(f.span[1], np.zeros_like(f.data)) for f in use], **kw)
    writer = write_png16 if ev_cfg["images"] == "png" else write_raw
    ext = "png" if ev_cfg["images"] == "png" else "raw"
    writer(out / f"iwe_{name}.{ext}", iwe.image)
    writer(out / f"iwe_identity_{name}.{ext}", ident.image)
    print(report.table())


def ablation_grid(ab):
    """Arms of the ablation table: ``(label, noise pattern, weight, velocity, self_supervised)``."""
    arms = []
    for vel in ab["velocity"]:
        for pat in ab["patterns"]:
            weights = [0.0] if pat == "none" else ab["weights"]
            for w in weights:
                arms.append({"pattern": pat, "weight": float(w), "velocity": bool(vel), "self_supervised": False})
    if ab["self_supervised"]:
        w = 0.3 if 0.3 in ab["weights"] else float(ab["weights"][0])
        arms.append({"pattern": "regional", "weight": w, "velocity": True, "self_supervised": True})
    for a in arms:
        a["hash"] = hashlib.sha1(json.dumps(a, sort_keys=True).encode()).hexdigest()[:12]
    return arms


ABLATION_COLUMNS = ("arm", "hash", "pattern", "weight", "velocity", "self_supervised",
                    "epe_intermediate", "epe_linear", "epe_ltr", "fwl_htr", "fwl_ltr")


def run_arm(base_model, train_ds, val_ds, arm, noise: dict, tcfg, lcfg):
    """Train one refiner from ``base_model``'s weights and score it on ``val_ds``."""
    from .evalkit import fwl
    from .model import FlowModel
    from .train import NoiseSpec, evaluate_htr, train_residual

    model = FlowModel(replace(base_model.cfg, velocity=arm["velocity"]))
    model.load_state_dict(base_model.state_dict())
    spec = NoiseSpec(**dict(noise, pattern=arm["pattern"], weight=arm["weight"]))
    train_residual(model, train_ds, spec, lcfg, tcfg, self_supervised=arm["self_supervised"])
    scores = evaluate_htr(model, val_ds)
    f_htr, f_ltr = [], []
    for s in val_ds:
        flows = model.infer_htr(s.events, s.plan, 1)
        f_htr.append(fwl(s.events, flows, mode="htr-piecewise", t_k=s.plan.T_k))
        f_ltr.append(fwl(s.events, flows[-1:], mode="ltr-linear", t_k=s.plan.T_k))
    return {"epe_intermediate": scores["epe_refined"], "epe_linear": scores["epe_linear"],
            "epe_ltr": scores["epe_ltr_refined"], "fwl_htr": float(np.mean(f_htr)),
            "fwl_ltr": float(np.mean(f_ltr))}


def cmd_ablate(args):
    from .train import SceneDataset

    cfg = _config(args)
    arms = ablation_grid(cfg.ablate)
    rows = []
    if not args.dry_run:
        base, _ = _load_model(args.ckpt, cfg)
        train_ds = SceneDataset.from_dir(args.data, split=cfg.synth["split"], bins=base.cfg.bins)
        val_ds = SceneDataset.from_dir(args.data, split=cfg.ablate["val_split"], bins=base.cfg.bins)
        if len(train_ds) == 0 or len(val_ds) == 0:
            raise DataError("ablation needs scenes in both the train and validation splits")
        tcfg, lcfg = cfg.train_config(), cfg.loss_config()
        noise = asdict(cfg.noise_spec())
    for i, arm in enumerate(arms):
        label = "self-gt" if arm["self_supervised"] else (
            f"{arm['pattern']}" + (f"@{arm['weight']:g}" if arm["pattern"] != "none" else "")
            + ("" if arm["velocity"] else " (no velocity)"))
        row = dict(arm, arm=label)
        if not args.dry_run:
            row.update(run_arm(base, train_ds, val_ds, arm, noise, tcfg, lcfg))
            print(f"[{i + 1}/{len(arms)}] {label}: epe {row['epe_intermediate']:.4f}", flush=True)
        rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    print(f"wrote {len(rows)} arms to {out}")


# ---------------------------------------------------------------------------
# argument parsing


def _scene_args(p):
    p.add_argument("--events", "--in", dest="events", help="EVS1 event file")
    p.add_argument("--t-k", "--tk", dest="t_k", type=int, help="interval start (us)")
    p.add_argument("--t-k1", "--tk1", dest="t_k1", type=int, help="interval end (us)")
    p.add_argument("--N", "--n", dest="N", type=int, default=5, help="target segments per interval")
    p.add_argument("--data", help="dataset directory (with manifest.jsonl)")
    p.add_argument("--scene", help="scene name inside --data")


def build_parser():
    parser = argparse.ArgumentParser(prog="evresid", description="Residual HTR event optical flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--family", choices=["linear", "sinusoid", "occlusion"])
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("voxelize", help="write the N+1 voxel grids of one interval (EVTN)")
    _scene_args(p)
    p.add_argument("--bins", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train the global stage or the residual refiner")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--stage", choices=["global", "residual"], required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="start from this checkpoint (e.g. the global stage)")
    p.add_argument("--resume", help="continue a run from its training checkpoint")
    p.add_argument("--log", help="CSV loss log")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", choices=["none", "white", "regional"])
    p.add_argument("--noise-weight", type=float)
    p.add_argument("--noise-s", type=int)
    p.add_argument("--noise-prob", type=float)
    p.add_argument("--no-velocity", action="store_true", help="refine flow instead of velocity")
    p.add_argument("--self-supervised", action="store_true", help="use the global LTR output as target")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="HTR flows for one interval")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    _scene_args(p)
    p.add_argument("--freq", type=int, default=1, help="timestamps per target segment")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics CSV and IWE images for a flow directory")
    p.add_argument("--config")
    p.add_argument("--flows", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--gt", help="directory of ground-truth .evfl files")
    p.add_argument("--mode", choices=["ltr-linear", "htr-piecewise"])
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="noise/velocity/self-supervision ablation table")
    p.add_argument("--config")
    p.add_argument("--ckpt", help="trained global-stage checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true", help="only write the grid")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ablate" and not args.dry_run and (args.ckpt is None or args.data is None):
        parser.error("ablate needs --ckpt and --data unless --dry-run")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
