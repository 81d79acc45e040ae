"""3D axis-aligned box algebra: IoU, NMS, offset coding and the FROC hit test.

All coordinates are voxel-space ``(z, y, x)``. Scalar functions operate on
:class:`Box3` objects; the ``*_array`` variants work on ``(N, 6)`` arrays laid
out as ``[cz, cy, cx, dz, dy, dx]`` and are what the detector uses internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# exp(t_size) is clamped so decoded sides stay within [MIN_BOX_SIZE, MAX_BOX_SIZE].
MAX_BOX_SIZE = 1e4
MIN_BOX_SIZE = 1e-3
_MAX_LOG_SIZE = math.log(MAX_BOX_SIZE)
_MIN_LOG_SIZE = math.log(MIN_BOX_SIZE)


@dataclass(frozen=True)
class Box3:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("Box3 needs 3 center and 3 size components")
        if not all(math.isfinite(c) for c in center):
            raise ValueError(f"non-finite box center {center}")
        if not all(math.isfinite(s) and s > 0 for s in size):
            raise ValueError(f"box sizes must be finite and > 0, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    @property
    def volume(self) -> float:
        d, h, w = self.size
        return d * h * w

    def as_array(self) -> np.ndarray:
        return np.array(self.center + self.size, dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box3":
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[:3]), tuple(a[3:6]))

    def translated(self, delta) -> "Box3":
        return Box3(tuple(c + float(t) for c, t in zip(self.center, delta)), self.size)


@dataclass(frozen=True)
class Annotation:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        if len(center) != 3 or not all(math.isfinite(c) for c in center):
            raise ValueError(f"invalid annotation center {self.center}")
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"annotation radius must be > 0, got {self.radius}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    def as_box(self) -> Box3:
        """Cube of side 2R centred on the nodule."""
        side = 2.0 * self.radius
        return Box3(self.center, (side, side, side))


@dataclass(frozen=True)
class Detection:
    box: Box3
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "score", float(self.score))


def boxes_to_array(boxes: Sequence[Box3]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 6))
    return np.stack([b.as_array() for b in boxes])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (N, 6) and (M, 6)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    a_lo = a[:, None, :3] - a[:, None, 3:] / 2
    a_hi = a[:, None, :3] + a[:, None, 3:] / 2
    b_lo = b[None, :, :3] - b[None, :, 3:] / 2
    b_hi = b[None, :, :3] + b[None, :, 3:] / 2
    overlap = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    inter = overlap.prod(axis=-1)
    vol_a = a[:, 3:].prod(axis=-1)[:, None]
    vol_b = b[:, 3:].prod(axis=-1)[None, :]
    union = vol_a + vol_b - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou3d(a: Box3, b: Box3) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def center_hit(det: Detection, ann: Annotation) -> bool:
    # inclusive boundary: distance == R counts as a hit
    return math.dist(det.box.center, ann.center) <= ann.radius


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices ordered by score (ties by input index)."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    order = np.argsort(-scores, kind="stable")
    lo = boxes[:, :3] - boxes[:, 3:] / 2
    hi = boxes[:, :3] + boxes[:, 3:] / 2
    vol = boxes[:, 3:].prod(axis=1)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        overlap = np.clip(np.minimum(hi[i], hi[rest]) - np.maximum(lo[i], lo[rest]), 0.0, None)
        inter = overlap.prod(axis=1)
        iou = inter / (vol[i] + vol[rest] - inter)
        suppressed[rest[iou >= iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    dets = list(dets)
    if not dets:
        if not 0.0 <= iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
        return []
    boxes = boxes_to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Center/log-size offsets of ``gt`` boxes relative to ``anchors`` (broadcasting)."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    t_center = (gt[..., :3] - anchors[..., :3]) / anchors[..., 3:]
    t_size = np.log(gt[..., 3:] / anchors[..., 3:])
    return np.concatenate([t_center, t_size], axis=-1)


def decode_array(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    center = anchors[..., :3] + offsets[..., :3] * anchors[..., 3:]
    log_size = np.log(anchors[..., 3:]) + offsets[..., 3:]
    size = np.exp(np.clip(log_size, _MIN_LOG_SIZE, _MAX_LOG_SIZE))
    return np.concatenate([center, size], axis=-1)


def encode_offsets(gt: Box3, anchor: Box3) -> np.ndarray:
    return encode_array(gt.as_array(), anchor.as_array())


def decode_offsets(offsets, anchor: Box3) -> Box3:
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (6,) or not np.all(np.isfinite(offsets)):
        raise ValueError("decode_offsets expects 6 finite offsets")
    return Box3.from_array(decode_array(offsets, anchor.as_array()))
