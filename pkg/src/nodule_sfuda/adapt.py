"""Two-step source-free adaptation.

Step 1 adapts the backbone with instance-level contrastive learning on RPN
auto-labelled proposals. Step 2 runs teacher-student mutual learning: the
EMA teacher's confident RPN proposals become pseudo ground truth for the
student, whose RoI probabilities are also regularised by the weighted
entropy loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import losses as L
from .data import ScanRecord, extract_patch
from .detector.backprop import LossSpec, PatchTask, loss_gradient
from .detector.model import (DetectorParams, backbone_forward, pool_boxes, propose, rpn_forward,
                             sigmoid)
from .detector.optim import sgd_step
from .detector.train import DetectorConfig, batches, evaluate_model, random_origin
from .geom import Box3
from .targets import assign_targets, sample_labels

logger = logging.getLogger(__name__)

# step 1 leaves the RoI head untouched
STEP1_LAYERS = ("conv1", "conv2", "rpn")


@dataclass(frozen=True)
class AdaptConfig:
    t_fg: float = 0.9
    t_bg: float = 0.1
    max_fg: int = 16
    max_bg: int = 32
    delta: float = 0.7
    beta: float = 0.9996
    eta: float = 1.0
    contrastive: L.ContrastiveConfig = L.ContrastiveConfig()
    we: L.WEConfig = L.WEConfig()
    epochs: int = 100
    nms_iou: float = 0.1
    top_n: int = 64
    patches_per_scan: int = 2
    # per-stage mean instead of sum for the student loss
    normalize: bool = True
    contrastive_features: str = "relu"

    def __post_init__(self):
        if not 0 <= self.t_bg < self.t_fg <= 1:
            raise ValueError(f"need 0 <= t_bg < t_fg <= 1, got {self.t_bg}, {self.t_fg}")
        if not 0 <= self.delta <= 1:
            raise ValueError(f"delta must be in [0, 1], got {self.delta}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not (1 <= self.max_fg <= 16 and 1 <= self.max_bg <= 32):
            raise ValueError("max_fg must be in [1, 16] and max_bg in [1, 32]")
        if self.epochs < 0 or self.top_n < 1 or self.patches_per_scan < 1:
            raise ValueError("epochs >= 0, top_n >= 1, patches_per_scan >= 1 required")

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown adapt keys: {sorted(unknown)}")
        if isinstance(d.get("contrastive"), dict):
            d["contrastive"] = _strict(L.ContrastiveConfig, d["contrastive"], "adapt.contrastive")
        if isinstance(d.get("we"), dict):
            d["we"] = _strict(L.WEConfig, d["we"], "adapt.we")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _strict(cls, d, where):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class TeacherStudent:
    teacher: DetectorParams
    student: DetectorParams

    def __post_init__(self):
        if not self.teacher.same_layout(self.student):
            raise ValueError("teacher and student manifests differ")

    @classmethod
    def from_params(cls, params: DetectorParams) -> "TeacherStudent":
        return cls(params.copy(), params.copy())


@dataclass(frozen=True)
class PseudoNodule:
    box: Box3
    score: float


# -- step 1 ----------------------------------------------------------------

def select_instances(proposals, feature_map, cfg: AdaptConfig, rng):
    """Split proposals into foreground/background boxes by RPN score.

    Foreground: score >= t_fg, highest ``max_fg`` kept. Background:
    score <= t_bg, ``max_bg`` drawn uniformly (seeded). Proposals whose pooled
    feature is the zero vector are skipped.
    """
    fg = [p for p in proposals if p.score >= cfg.t_fg]
    bg = [p for p in proposals if p.score <= cfg.t_bg]
    fg_boxes = np.asarray([p.box for p in fg]).reshape(-1, 6)
    bg_boxes = np.asarray([p.box for p in bg]).reshape(-1, 6)
    if len(fg_boxes):
        feats, _ = pool_boxes(feature_map, fg_boxes)
        fg_boxes = fg_boxes[np.linalg.norm(feats, axis=1) >= 1e-12]
        # proposals arrive sorted by score, so the cap keeps the best
        fg_boxes = fg_boxes[: cfg.max_fg]
    if len(bg_boxes):
        feats, _ = pool_boxes(feature_map, bg_boxes)
        bg_boxes = bg_boxes[np.linalg.norm(feats, axis=1) >= 1e-12]
        if len(bg_boxes) > cfg.max_bg:
            idx = np.sort(rng.choice(len(bg_boxes), cfg.max_bg, replace=False))
            bg_boxes = bg_boxes[idx]
    return fg_boxes, bg_boxes


def auto_label_instances(proposals, feature_map, cfg: AdaptConfig, rng=None) -> L.InstanceFeatures:
    rng = np.random.default_rng(0) if rng is None else rng
    fg_boxes, bg_boxes = select_instances(proposals, feature_map, cfg, rng)
    fg, _ = pool_boxes(feature_map, fg_boxes)
    bg, _ = pool_boxes(feature_map, bg_boxes)
    return L.InstanceFeatures(fg, bg, dim=feature_map.shape[0])


def target_crops(scans: Sequence[ScanRecord], rng, side: int, per_scan: int):
    items = [(scan, random_origin(rng, scan.voxels.shape, side)) for scan in scans for _ in range(per_scan)]
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def step1_adapt(source: DetectorParams, target_scans: Sequence[ScanRecord], cfg: AdaptConfig,
                det_cfg: DetectorConfig, seed: int, epochs: int | None = None):
    """Contrastive adaptation of backbone + RPN. Returns ``(params, history)``.

    Batches in which every contrastive term is inactive skip the optimizer
    step entirely (no weight decay either).
    """
    scans = list(target_scans)
    if not scans:
        raise ValueError("step1_adapt: no target patches")
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    params = source.copy()
    opt = det_cfg.optimizer(params.size)
    mask = params.layer_mask(STEP1_LAYERS)
    spec = LossSpec("contrastive", contrastive=cfg.contrastive,
                    contrastive_features=cfg.contrastive_features)
    history = []
    for epoch in range(epochs):
        losses, n_fg, n_bg, steps = [], 0, 0, 0
        for batch in batches(target_crops(scans, rng, det_cfg.patch_side, cfg.patches_per_scan),
                             det_cfg.batch_size):
            tasks = []
            for scan, origin in batch:
                patch = extract_patch(scan.voxels, origin, det_cfg.patch_side)
                cache = backbone_forward(params, patch)
                rpn = rpn_forward(params, cache.feature_map)
                props = propose(rpn, cfg.top_n, cfg.nms_iou, patch.shape, det_cfg.pre_nms_top_n)
                fg, bg = select_instances(props, cache.feature_map, cfg, rng)
                n_fg += len(fg)
                n_bg += len(bg)
                tasks.append(PatchTask(patch, fg_boxes=fg, bg_boxes=bg))
            res = loss_gradient(params, tasks, spec)
            losses.append(res.value)
            if any(r.active for r in res.patches):
                params = sgd_step(params, res.grad, opt, mask)
                steps += 1
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else 0.0,
                        "fg": n_fg, "bg": n_bg, "steps": steps})
        logger.info("step1 epoch %d loss %.4f fg %d bg %d", epoch + 1, history[-1]["loss"], n_fg, n_bg)
    return params, history


# -- step 2 ----------------------------------------------------------------

def make_pseudo_labels(teacher: DetectorParams, patch, cfg: AdaptConfig,
                       det_cfg: DetectorConfig | None = None) -> list[PseudoNodule]:
    """Teacher RPN proposals (after NMS) whose score reaches ``delta``."""
    pre = det_cfg.pre_nms_top_n if det_cfg is not None else 512
    cache = backbone_forward(teacher, patch)
    rpn = rpn_forward(teacher, cache.feature_map)
    props = propose(rpn, cfg.top_n, cfg.nms_iou, np.asarray(patch).shape, pre)
    return [PseudoNodule(Box3.from_array(p.box), p.score) for p in props if p.score >= cfg.delta]


def ema_update(ts: TeacherStudent, beta: float) -> DetectorParams:
    """``teacher <- beta * teacher + (1 - beta) * student``."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if not ts.teacher.same_layout(ts.student):
        raise ValueError("teacher/student shape mismatch")
    flat = beta * ts.teacher.flat + (1.0 - beta) * ts.student.flat
    return DetectorParams(flat, ts.teacher.manifest)


def student_task(student: DetectorParams, patch, pseudo_boxes, cfg: AdaptConfig,
                 det_cfg: DetectorConfig, rng, supervise: bool = True) -> PatchTask:
    """Targets for the student on one patch from the teacher's pseudo boxes."""
    cache = backbone_forward(student, patch)
    rpn = rpn_forward(student, cache.feature_map)
    probs = sigmoid(rpn.logits)
    props = propose(rpn, cfg.top_n, cfg.nms_iou, patch.shape, det_cfg.pre_nms_top_n, probs)
    own = np.asarray([p.box for p in props]).reshape(-1, 6)
    pseudo_boxes = np.asarray(pseudo_boxes).reshape(-1, 6)
    task = PatchTask(patch)
    roi_boxes = np.concatenate([own, pseudo_boxes])
    r_labels, r_offsets, _ = assign_targets(pseudo_boxes, roi_boxes, det_cfg.pos_iou, det_cfg.neg_iou)
    if supervise:
        labels, offsets, _ = assign_targets(pseudo_boxes, rpn.anchors.boxes(), det_cfg.pos_iou, det_cfg.neg_iou)
        task.rpn_labels = sample_labels(labels, rng, det_cfg.rpn_max_pos, det_cfg.rpn_max_neg, probs,
                                        det_cfg.rpn_hard_fraction)
        task.rpn_offsets = offsets
        sampled = sample_labels(r_labels, rng, det_cfg.roi_max_pos, det_cfg.roi_max_neg)
        keep = sampled >= 0
        task.roi_boxes = roi_boxes[keep]
        task.roi_labels = sampled[keep]
        task.roi_offsets = r_offsets[keep]
    # WE instances: the student's own proposals plus teacher-assigned positives
    task.we_boxes = np.concatenate([own, roi_boxes[len(own):][r_labels[len(own):] == 1]])
    return task


def step2_adapt(adapted: DetectorParams, target_scans: Sequence[ScanRecord], cfg: AdaptConfig,
                det_cfg: DetectorConfig, seed: int, epochs: int | None = None):
    """Teacher-student mutual learning. Returns ``(student, teacher, history)``.

    The supervised term is dropped for batches without any pseudo nodule;
    batches with no active loss term skip the optimizer step. EMA runs once
    per iteration.
    """
    scans = list(target_scans)
    if not scans:
        raise ValueError("step2_adapt: no target patches")
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    ts = TeacherStudent.from_params(adapted)
    opt = det_cfg.optimizer(adapted.size)
    spec = LossSpec("student", we=cfg.we, eta=cfg.eta, normalize=cfg.normalize)
    history = []
    for epoch in range(epochs):
        losses, n_pseudo, we_used, we_total, steps = [], 0, 0, 0, 0
        for batch in batches(target_crops(scans, rng, det_cfg.patch_side, cfg.patches_per_scan),
                             det_cfg.batch_size):
            patches = [extract_patch(scan.voxels, origin, det_cfg.patch_side) for scan, origin in batch]
            pseudo = [make_pseudo_labels(ts.teacher, p, cfg, det_cfg) for p in patches]
            counts = [len(p) for p in pseudo]
            n_pseudo += sum(counts)
            supervise = sum(counts) > 0
            tasks = [student_task(ts.student, patch, [q.box.as_array() for q in pl], cfg, det_cfg, rng, supervise)
                     for patch, pl in zip(patches, pseudo)]
            res = loss_gradient(ts.student, tasks, spec)
            losses.append(res.value)
            for r in res.patches:
                we_used += r.terms.get("we_used", 0)
                we_total += 0 if r.roi_probs is None else len(r.roi_probs)
            if any(r.active for r in res.patches):
                ts.student = sgd_step(ts.student, res.grad, opt)
                steps += 1
            ts.teacher = ema_update(ts, cfg.beta)
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else 0.0,
                        "pseudo": n_pseudo, "we_used": we_used, "we_total": we_total, "steps": steps})
        logger.info("step2 epoch %d loss %.4f pseudo %d we_used %d/%d", epoch + 1,
                    history[-1]["loss"], n_pseudo, we_used, we_total)
    return ts.student, ts.teacher, history


# -- pipeline --------------------------------------------------------------

def _froc_snapshot(params, scans, det_cfg):
    if not scans:
        return None
    result, _ = evaluate_model(params, scans, det_cfg)
    return result.as_dict()


def adapt_pipeline(source: DetectorParams, target_scans: Sequence[ScanRecord], cfg: AdaptConfig,
                   det_cfg: DetectorConfig, seed: int, steps: str = "all", eval_scans=()):
    """Run step 1 and/or step 2. Returns ``(final_params, report)``.

    ``steps`` is "1", "2" or "all". ``eval_scans`` (annotated) produce the
    FROC snapshots recorded in the report.
    """
    if steps not in ("1", "2", "all"):
        raise ValueError(f"steps must be '1', '2' or 'all', got {steps!r}")
    report = {"seed": seed, "steps": steps, "config": cfg.to_dict(), "detector": det_cfg.to_dict(),
              "froc": {}}
    eval_scans = list(eval_scans)
    params = source
    if eval_scans:
        report["froc"]["source"] = _froc_snapshot(params, eval_scans, det_cfg)
    if steps in ("1", "all"):
        params, hist = step1_adapt(params, target_scans, cfg, det_cfg, seed)
        report["step1"] = hist
        if eval_scans:
            report["froc"]["step1"] = _froc_snapshot(params, eval_scans, det_cfg)
    if steps in ("2", "all"):
        params, _teacher, hist = step2_adapt(params, target_scans, cfg, det_cfg, seed + 1)
        report["step2"] = hist
        report["pseudo_counts"] = [h["pseudo"] for h in hist]
        if eval_scans:
            report["froc"]["step2"] = _froc_snapshot(params, eval_scans, det_cfg)
    return params, report
