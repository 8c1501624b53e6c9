"""Training/evaluation samples built from synthetic scenes or exported datasets.

Ground truth is fetched lazily through :meth:`Sample.gt`, which counts every
access in the owning dataset's ``audit``; a self-supervised run can therefore
prove it never touched a ground-truth flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..events import SegmentPlan, load_events, voxelize_plan
from ..formats import read_flow
from ..synth import SceneSpec, read_manifest, render_scene


@dataclass
class Sample:
    name: str
    plan: SegmentPlan
    voxels: np.ndarray  # (N+1, B, H, W)
    events: object
    _gt_source: object = None
    _audit: dict = field(default_factory=dict)

    def gt(self, n):
        """Ground-truth flow from ``T_k`` to target ``n`` (a FlowField)."""
        if self._gt_source is None:
            raise LookupError(f"sample {self.name!r} has no ground truth")
        self._audit["gt_reads"] = self._audit.get("gt_reads", 0) + 1
        return self._gt_source(n)

    @property
    def shape(self):
        return self.voxels.shape[-2:]


class SceneDataset:
    def __init__(self, samples=(), audit=None):
        self.samples = list(samples)
        self.audit = audit if audit is not None else {"gt_reads": 0}
        for s in self.samples:
            s._audit = self.audit

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @classmethod
    def from_specs(cls, specs, bins=2):
        audit = {"gt_reads": 0}
        samples = []
        for i, spec in enumerate(specs):
            stream, gt = render_scene(spec)
            plan = spec.plan()
            vox = voxelize_plan(stream, plan, bins=bins)

            def source(n, gt=gt, plan=plan):
                return gt.at(plan.T_k, plan.timestamp(n))

            samples.append(Sample(spec.name or f"scene_{i:04d}", plan, vox, stream, source, audit))
        return cls(samples, audit)

    @classmethod
    def from_dir(cls, root, split=None, bins=2, with_gt=True):
        root = Path(root)
        audit = {"gt_reads": 0}
        samples = []
        for rec in read_manifest(root, split):
            stream = load_events(root / rec["events"])
            plan = SegmentPlan(rec["T_k"], rec["T_k1"], rec["N"])
            vox = voxelize_plan(stream, plan, bins=bins)
            source = None
            if with_gt:
                def source(n, flows=rec["flows"]):
                    return read_flow(root / flows[n - 1])
            samples.append(Sample(rec["name"], plan, vox, stream, source, audit))
        return cls(samples, audit)


def specs_from_manifest(root, split=None):
    return [SceneSpec.from_dict(rec["spec"]) for rec in read_manifest(root, split)]
