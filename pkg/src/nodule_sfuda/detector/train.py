"""Supervised source training, patch sampling and full-volume inference."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import PAD_VALUE, ScanRecord, extract_patch, pad_to_multiple
from ..geom import Box3, Detection, decode_array, nms_indices
from ..targets import assign_targets, sample_labels
from .backprop import LossSpec, PatchTask, loss_gradient
from .model import (DetectorParams, backbone_forward, clip_boxes, forward_roi, init_params,
                    pool_boxes, propose, rpn_forward, sigmoid)
from .optim import OptimState, save_checkpoint, sgd_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorConfig:
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    patch_side: int = 32
    patches_per_scan: int = 2
    top_n: int = 64
    nms_iou: float = 0.1
    pre_nms_top_n: int = 512
    pos_iou: float = 0.3
    neg_iou: float = 0.1
    # sampling caps; None supervises every labelled anchor/proposal
    rpn_max_pos: int | None = None
    rpn_max_neg: int | None = None
    rpn_hard_fraction: float = 0.0
    roi_max_pos: int | None = None
    roi_max_neg: int | None = None
    detections_per_scan: int = 32

    def __post_init__(self):
        if self.patch_side % 4:
            raise ValueError("patch_side must be divisible by the detector stride 4")
        if self.batch_size < 1 or self.epochs < 0 or self.top_n < 1:
            raise ValueError("batch_size >= 1, epochs >= 0, top_n >= 1 required")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown detector keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def optimizer(self, size: int) -> OptimState:
        return OptimState(size, self.lr, self.momentum, self.weight_decay)


def annotation_boxes(scan: ScanRecord, origin=(0, 0, 0), side=None) -> np.ndarray:
    """2R cubes of the annotations whose centers fall in the patch, in patch coordinates."""
    rows = []
    for a in scan.annotations:
        c = np.asarray(a.center) - np.asarray(origin)
        if side is not None and (np.any(c < 0) or np.any(c >= side)):
            continue
        rows.append(np.concatenate([c, [2 * a.radius] * 3]))
    return np.asarray(rows).reshape(-1, 6)


def random_origin(rng, shape, side):
    return tuple(int(rng.integers(-side // 4, max(n - 3 * side // 4, -side // 4 + 1))) for n in shape)


def sample_source_patches(scans: Sequence[ScanRecord], rng, cfg: DetectorConfig):
    """Crops drawn once per run: half nodule-centred (jittered), half uniform."""
    side = cfg.patch_side
    items = []
    for scan in scans:
        for k in range(cfg.patches_per_scan):
            if k % 2 == 0 and scan.annotations:
                a = scan.annotations[int(rng.integers(len(scan.annotations)))]
                jitter = rng.integers(-side // 4, side // 4 + 1, size=3)
                origin = tuple(int(round(c)) - side // 2 + int(j) for c, j in zip(a.center, jitter))
            else:
                origin = random_origin(rng, scan.voxels.shape, side)
            items.append((scan, origin))
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def supervised_task(params: DetectorParams, patch, gt_boxes, cfg: DetectorConfig, rng) -> PatchTask:
    """Targets for one patch: sampled anchors at RPN level, proposals + GT at RoI level."""
    cache = backbone_forward(params, patch)
    rpn = rpn_forward(params, cache.feature_map)
    probs = sigmoid(rpn.logits)
    anchors = rpn.anchors.boxes()
    labels, offsets, _ = assign_targets(gt_boxes, anchors, cfg.pos_iou, cfg.neg_iou)
    labels = sample_labels(labels, rng, cfg.rpn_max_pos, cfg.rpn_max_neg, probs, cfg.rpn_hard_fraction)
    props = propose(rpn, cfg.top_n, cfg.nms_iou, patch.shape, cfg.pre_nms_top_n, probs)
    roi_boxes = np.concatenate([np.asarray([p.box for p in props]).reshape(-1, 6), gt_boxes])
    r_labels, r_offsets, _ = assign_targets(gt_boxes, roi_boxes, cfg.pos_iou, cfg.neg_iou)
    r_labels = sample_labels(r_labels, rng, cfg.roi_max_pos, cfg.roi_max_neg)
    keep = r_labels >= 0
    return PatchTask(patch, rpn_labels=labels, rpn_offsets=offsets, roi_boxes=roi_boxes[keep],
                     roi_labels=r_labels[keep], roi_offsets=r_offsets[keep])


def train_source(scans: Sequence[ScanRecord], cfg: DetectorConfig, seed: int,
                 epochs: int | None = None, ckpt_dir=None, params: DetectorParams | None = None):
    """Supervised training on labelled source scans. Returns ``(params, epoch_losses)``."""
    scans = list(scans)
    if not scans:
        raise ValueError("train_source: empty dataset")
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    params = init_params(seed) if params is None else params.copy()
    opt = cfg.optimizer(params.size)
    spec = LossSpec("supervised")
    crops = sample_source_patches(scans, rng, cfg)
    history = []
    for epoch in range(epochs):
        losses = []
        for batch in batches(crops, cfg.batch_size):
            tasks = []
            for scan, origin in batch:
                patch = extract_patch(scan.voxels, origin, cfg.patch_side)
                gt = annotation_boxes(scan, origin, cfg.patch_side)
                tasks.append(supervised_task(params, patch, gt, cfg, rng))
            res = loss_gradient(params, tasks, spec)
            params = sgd_step(params, res.grad, opt)
            losses.append(res.value)
        history.append(float(np.mean(losses)))
        logger.info("source epoch %d loss %.4f", epoch + 1, history[-1])
        if ckpt_dir is not None:
            save_checkpoint(params, Path(ckpt_dir) / f"source_epoch{epoch + 1:03d}.ckpt",
                            {"epoch": epoch + 1, "loss": history[-1], "seed": seed})
    return params, history


def detect(params: DetectorParams, volume, cfg: DetectorConfig) -> list[Detection]:
    """Full-volume inference: RPN proposals rescored and refined by the RoI head."""
    shape = np.asarray(volume).shape
    padded = pad_to_multiple(volume, 4)
    cache = backbone_forward(params, padded)
    rpn = rpn_forward(params, cache.feature_map)
    props = propose(rpn, cfg.top_n, cfg.nms_iou, padded.shape, cfg.pre_nms_top_n)
    if not props:
        return []
    boxes = np.asarray([p.box for p in props])
    pooled, _ = pool_boxes(cache.feature_map, boxes)
    roi = forward_roi(params, pooled)
    scores = sigmoid(roi.logits)
    refined = clip_boxes(decode_array(roi.offsets, boxes), shape)
    keep = nms_indices(refined, scores, cfg.nms_iou)[: cfg.detections_per_scan]
    return [Detection(Box3.from_array(refined[i]), float(scores[i])) for i in keep]


def detect_scans(params, scans: Sequence[ScanRecord], cfg: DetectorConfig) -> dict:
    return {s.id: detect(params, s.voxels, cfg) for s in scans}


def evaluate_model(params, scans: Sequence[ScanRecord], cfg: DetectorConfig):
    from ..froc import evaluate

    dets = detect_scans(params, scans, cfg)
    anns = {s.id: list(s.annotations) for s in scans}
    return evaluate(dets, anns, n_scans=len(scans))
