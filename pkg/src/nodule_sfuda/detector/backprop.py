"""Reverse-mode gradients of batch losses w.r.t. the flat parameter vector.

Proposal/instance boxes and target assignments are fixed inputs carried by
:class:`PatchTask`; gradients never flow through box coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import losses as L
from .model import (FEAT_CHANNELS, NUM_ANCHORS, DetectorParams, _col2im,
                    backbone_forward, pool_boxes, rpn_forward, sigmoid)

KINDS = ("contrastive", "supervised", "student")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss in term {term!r}: {value}")
        self.term = term
        self.value = value


@dataclass
class PatchTask:
    """One patch plus everything a loss needs about it."""

    patch: np.ndarray
    fg_boxes: np.ndarray | None = None
    bg_boxes: np.ndarray | None = None
    rpn_labels: np.ndarray | None = None
    rpn_offsets: np.ndarray | None = None
    roi_boxes: np.ndarray | None = None
    roi_labels: np.ndarray | None = None
    roi_offsets: np.ndarray | None = None
    we_boxes: np.ndarray | None = None

    @property
    def has_sup(self) -> bool:
        return self.rpn_labels is not None or self.roi_labels is not None


@dataclass(frozen=True)
class LossSpec:
    kind: str
    contrastive: L.ContrastiveConfig = L.ContrastiveConfig()
    we: L.WEConfig = L.WEConfig()
    eta: float = 1.0
    # divide each stage's summed terms by its instance count (RPN anchors, RoIs, WE RoIs)
    normalize: bool = False
    # contrastive instances pooled from the backbone output after ("relu") or before ("pre") its ReLU
    contrastive_features: str = "relu"

    def __post_init__(self):
        if self.contrastive_features not in ("relu", "pre"):
            raise ValueError(f"contrastive_features must be 'relu' or 'pre', got {self.contrastive_features!r}")
        if self.kind not in KINDS:
            raise ValueError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValueError(f"eta must be >= 0, got {self.eta}")


@dataclass
class PatchResult:
    value: float
    terms: dict = field(default_factory=dict)
    active: bool = True
    roi_probs: np.ndarray | None = None


def _empty_boxes(b):
    return b is None or len(b) == 0


def _check(term, value):
    if not math.isfinite(value):
        raise NonFiniteLossError(term, value)


def patch_loss_gradient(params: DetectorParams, task: PatchTask, spec: LossSpec, grad: np.ndarray,
                        scale: float = 1.0) -> PatchResult:
    """Accumulate ``scale * d(loss)/d(params)`` into ``grad``; return the loss."""
    cache = backbone_forward(params, task.patch)
    fmap = cache.feature_map
    dfmap = np.zeros_like(fmap)
    terms = {}
    value = 0.0
    active = False
    roi_probs = None

    def scatter(dpooled, regions):
        for g, region in zip(dpooled, regions):
            view = dfmap[(slice(None),) + region]
            count = view[0].size
            view += (g / count)[:, None, None, None]

    if spec.kind == "contrastive":
        pre = spec.contrastive_features == "pre"
        source = cache.extra["z2"] if pre else fmap
        fg = np.zeros((0, FEAT_CHANNELS)) if _empty_boxes(task.fg_boxes) else None
        bg = np.zeros((0, FEAT_CHANNELS)) if _empty_boxes(task.bg_boxes) else None
        fg_regions = bg_regions = []
        if fg is None:
            fg, fg_regions = pool_boxes(source, task.fg_boxes)
        if bg is None:
            bg, bg_regions = pool_boxes(source, task.bg_boxes)
        out = L.contrastive_loss(L.InstanceFeatures(fg, bg, dim=FEAT_CHANNELS), spec.contrastive)
        _check("contrastive", out.value)
        value, terms, active = out.value, dict(out.terms), out.active
        if active:
            scatter(out.grads[0] * scale, fg_regions)
            scatter(out.grads[1] * scale, bg_regions)
        if pre:
            # gradient already w.r.t. the pre-activation map
            _backbone_backward(params, cache, np.zeros_like(fmap), grad, dz2=dfmap)
            return PatchResult(value, terms, active, roi_probs)
    else:
        sup_weight = 1.0 if spec.kind == "supervised" else spec.eta
        rpn = rpn_forward(params, fmap)
        d_rpn_logits = np.zeros_like(rpn.logits)
        d_rpn_offsets = np.zeros_like(rpn.offsets)

        roi_boxes = np.zeros((0, 6)) if task.roi_boxes is None else np.asarray(task.roi_boxes).reshape(-1, 6)
        we_boxes = np.zeros((0, 6))
        if spec.kind == "student" and task.we_boxes is not None:
            we_boxes = np.asarray(task.we_boxes).reshape(-1, 6)
        all_boxes = np.concatenate([roi_boxes, we_boxes])
        n_roi = len(roi_boxes)
        pooled, regions = pool_boxes(fmap, all_boxes)
        roi_out, roi_cache = _roi_forward_cached(params, pooled)
        d_roi_logits = np.zeros(len(all_boxes))
        d_roi_offsets = np.zeros((len(all_boxes), 6))

        if task.has_sup:
            rpn_p = sigmoid(rpn.logits)
            roi_p = sigmoid(roi_out[0][:n_roi])
            rpn_t = L.DetectionTargets(
                task.rpn_labels if task.rpn_labels is not None else -np.ones(len(rpn_p)),
                task.rpn_offsets if task.rpn_offsets is not None else np.zeros((len(rpn_p), 6)))
            roi_t = L.DetectionTargets(
                task.roi_labels if task.roi_labels is not None else -np.ones(n_roi),
                task.roi_offsets if task.roi_offsets is not None else np.zeros((n_roi, 6)))
            sup = L.sup_detection_loss(L.DetectionPreds(rpn_p, rpn.offsets),
                                       L.DetectionPreds(roi_p, roi_out[1][:n_roi]), rpn_t, roi_t)
            for name, v in sup.terms.items():
                _check(name, v)
            k_rpn = k_roi = 1.0
            if spec.normalize:
                k_rpn = 1.0 / max(1, int(np.sum(rpn_t.labels >= 0)))
                k_roi = 1.0 / max(1, int(np.sum(roi_t.labels >= 0)))
            st = sup.terms
            if st:
                st = {"rpn_cls": k_rpn * st["rpn_cls"], "rpn_reg": k_rpn * st["rpn_reg"],
                      "roi_cls": k_roi * st["roi_cls"], "roi_reg": k_roi * st["roi_reg"]}
            value += sup_weight * sum(st.values())
            terms.update(st)
            active = active or sup.active
            (g_rp, g_rt), (g_op, g_ot) = sup.grads
            c = sup_weight * scale
            d_rpn_logits += c * k_rpn * g_rp * rpn_p * (1 - rpn_p)
            d_rpn_offsets += c * k_rpn * g_rt
            d_roi_logits[:n_roi] += c * k_roi * g_op * roi_p * (1 - roi_p)
            d_roi_offsets[:n_roi] += c * k_roi * g_ot

        if spec.kind == "student" and len(we_boxes):
            we_p = sigmoid(roi_out[0][n_roi:])
            we = L.we_loss(we_p, spec.we)
            _check("we", we.value)
            k_we = 1.0 / len(we_boxes) if spec.normalize else 1.0
            value += k_we * we.value
            terms["we"] = k_we * we.value
            terms["we_used"] = we.terms["n_used"]
            active = active or we.active
            d_roi_logits[n_roi:] += scale * k_we * we.grads * we_p * (1 - we_p)
            roi_probs = we_p

        # RPN head backward
        d_out = np.concatenate([d_rpn_logits[:, None], d_rpn_offsets], axis=1)       # (V*A, 7)
        d_out = d_out.reshape(-1, NUM_ANCHORS, 7).transpose(1, 2, 0).reshape(NUM_ANCHORS * 7, -1)
        flat_f = fmap.reshape(FEAT_CHANNELS, -1)
        grad[params.slices["rpn.w"]] += (d_out @ flat_f.T).ravel()
        grad[params.slices["rpn.b"]] += d_out.sum(axis=1)
        dfmap += (params["rpn.w"].T @ d_out).reshape(dfmap.shape)

        # RoI head backward
        if len(all_boxes):
            d_o = np.concatenate([d_roi_logits[:, None], d_roi_offsets], axis=1)  # (R, 7)
            v, h_pre, h = roi_cache
            grad[params.slices["roi.w2"]] += (d_o.T @ h).ravel()
            grad[params.slices["roi.b2"]] += d_o.sum(axis=0)
            dh = (d_o @ params["roi.w2"]) * (h_pre > 0)
            grad[params.slices["roi.w1"]] += (dh.T @ v).ravel()
            grad[params.slices["roi.b1"]] += dh.sum(axis=0)
            scatter(dh @ params["roi.w1"], regions)

    _backbone_backward(params, cache, dfmap, grad)
    return PatchResult(value, terms, active, roi_probs)


def _roi_forward_cached(params, pooled):
    v = pooled.reshape(-1, FEAT_CHANNELS)
    h_pre = v @ params["roi.w1"].T + params["roi.b1"]
    h = np.maximum(h_pre, 0.0)
    out = h @ params["roi.w2"].T + params["roi.b2"]
    return (out[:, 0], out[:, 1:]), (v, h_pre, h)


def _backbone_backward(params, cache, dfmap, grad, dz2=None):
    fmap = cache.feature_map
    d = dfmap * (fmap > 0)
    if dz2 is not None:
        d = d + dz2
    dz2 = d.reshape(FEAT_CHANNELS, -1)
    if not dz2.any():
        return
    grad[params.slices["conv2.w"]] += (dz2 @ cache.cols2.T).ravel()
    grad[params.slices["conv2.b"]] += dz2.sum(axis=1)
    dcols2 = params["conv2.w"].reshape(FEAT_CHANNELS, -1).T @ dz2
    da1 = _col2im(dcols2, cache.a1.shape, cache.out2_shape, cache.pad2_shape)
    dz1 = (da1 * (cache.a1 > 0)).reshape(8, -1)
    grad[params.slices["conv1.w"]] += (dz1 @ cache.cols1.T).ravel()
    grad[params.slices["conv1.b"]] += dz1.sum(axis=1)


@dataclass
class BatchResult:
    value: float
    grad: np.ndarray
    patches: list


def loss_gradient(params: DetectorParams, batch: Sequence[PatchTask], spec: LossSpec) -> BatchResult:
    """Mean loss over the batch and its exact gradient (same shape as ``params.flat``)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    grad = np.zeros(params.size)
    scale = 1.0 / len(batch)
    results = [patch_loss_gradient(params, task, spec, grad, scale) for task in batch]
    value = float(sum(r.value for r in results) * scale)
    _check(spec.kind, value)
    return BatchResult(value, grad, results)


def loss_value(params: DetectorParams, batch: Sequence[PatchTask], spec: LossSpec) -> float:
    """Loss only (used by finite-difference checks)."""
    return loss_gradient(params, batch, spec).value
