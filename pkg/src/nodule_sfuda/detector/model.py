"""Minimal two-stage 3D detector with exact reverse-mode gradients.

Backbone: two 3x3x3 stride-2 convolutions (1->8->16 channels, ReLU).
RPN head: 1x1x1 convolution to A*(1+6) outputs per feature voxel.
RoI head: average-pooled 16-vector -> 32 hidden (ReLU) -> logit + 6 offsets.

Everything lives in a single flat float64 vector described by a shape
manifest so that teacher/student copies and EMA are plain array ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geom import decode_array, nms_indices, MIN_BOX_SIZE

STRIDE = 4
ANCHOR_SIZES = (6.0, 10.0, 16.0)
NUM_ANCHORS = len(ANCHOR_SIZES)
FEAT_CHANNELS = 16
HIDDEN = 32
INTENSITY_SCALE = 255.0

# RoI head parameters are listed last; step 1 freezes them.
MANIFEST = (
    ("conv1.w", (8, 1, 3, 3, 3)),
    ("conv1.b", (8,)),
    ("conv2.w", (FEAT_CHANNELS, 8, 3, 3, 3)),
    ("conv2.b", (FEAT_CHANNELS,)),
    ("rpn.w", (NUM_ANCHORS * 7, FEAT_CHANNELS)),
    ("rpn.b", (NUM_ANCHORS * 7,)),
    ("roi.w1", (HIDDEN, FEAT_CHANNELS)),
    ("roi.b1", (HIDDEN,)),
    ("roi.w2", (7, HIDDEN)),
    ("roi.b2", (7,)),
)
LAYERS = ("conv1", "conv2", "rpn", "roi")


class DetectorParams:
    """Flat parameter vector plus ``(name, shape)`` manifest."""

    def __init__(self, flat=None, manifest=MANIFEST):
        self.manifest = tuple((str(n), tuple(int(d) for d in s)) for n, s in manifest)
        self.slices = {}
        offset = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise ValueError(f"flat vector has shape {flat.shape}, manifest needs ({offset},)")
        if not np.all(np.isfinite(flat)):
            raise ValueError("non-finite detector parameters")
        self.flat = flat

    def __getitem__(self, name) -> np.ndarray:
        return self.flat[self.slices[name]].reshape(dict(self.manifest)[name])

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.flat.copy(), self.manifest)

    def layer_mask(self, prefixes) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for name, _ in self.manifest:
            if name.split(".")[0] in prefixes:
                mask[self.slices[name]] = True
        return mask

    def same_layout(self, other: "DetectorParams") -> bool:
        return self.manifest == other.manifest

    def __eq__(self, other):
        return (isinstance(other, DetectorParams) and self.same_layout(other)
                and np.array_equal(self.flat, other.flat))

    def __repr__(self):
        return f"DetectorParams(size={self.size})"


def init_params(seed: int, prior: float = 0.01) -> DetectorParams:
    """He-normal weights, zero biases, RPN/RoI logit bias set to a low prior."""
    rng = np.random.default_rng(seed)
    params = DetectorParams()
    for name, shape in params.manifest:
        if name.endswith(".w") or name[-2:] in ("w1", "w2"):
            fan_in = int(np.prod(shape[1:]))
            params.flat[params.slices[name]] = rng.normal(0, math.sqrt(2.0 / fan_in), np.prod(shape))
    bias = math.log(prior / (1 - prior))
    params["rpn.b"][0::7] = bias
    params["roi.b2"][0] = bias
    # small regression outputs at start
    params["rpn.w"][[a * 7 + j for a in range(NUM_ANCHORS) for j in range(1, 7)]] *= 0.01
    params["roi.w2"][1:] *= 0.01
    return params


# -- convolution -----------------------------------------------------------

def _im2col(x, k=3, stride=2, pad=1):
    c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    do, ho, wo = (d + 2 * pad - k) // stride + 1, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    cols = np.empty((c, k * k * k, do, ho, wo))
    idx = 0
    for a in range(k):
        for b in range(k):
            for e in range(k):
                cols[:, idx] = xp[:, a:a + stride * do:stride, b:b + stride * ho:stride, e:e + stride * wo:stride]
                idx += 1
    return cols.reshape(c * k ** 3, do * ho * wo), (do, ho, wo), xp.shape


def _col2im(dcols, in_shape, out_shape, padded_shape, k=3, stride=2, pad=1):
    c = in_shape[0]
    do, ho, wo = out_shape
    dcols = dcols.reshape(c, k ** 3, do, ho, wo)
    dxp = np.zeros(padded_shape)
    idx = 0
    for a in range(k):
        for b in range(k):
            for e in range(k):
                dxp[:, a:a + stride * do:stride, b:b + stride * ho:stride, e:e + stride * wo:stride] += dcols[:, idx]
                idx += 1
    return dxp[:, pad:-pad, pad:-pad, pad:-pad]


# -- anchors ---------------------------------------------------------------

@dataclass(frozen=True)
class AnchorGrid:
    feat_shape: tuple
    stride: int = STRIDE
    sizes: tuple = ANCHOR_SIZES

    @property
    def count(self) -> int:
        return int(np.prod(self.feat_shape)) * len(self.sizes)

    def boxes(self) -> np.ndarray:
        """(N, 6) anchors ordered by (z, y, x, anchor)."""
        return _anchor_boxes(tuple(self.feat_shape), self.stride, tuple(self.sizes))


_ANCHOR_CACHE: dict = {}


def _anchor_boxes(feat_shape, stride, sizes):
    key = (feat_shape, stride, sizes)
    if key not in _ANCHOR_CACHE:
        grids = np.meshgrid(*[(np.arange(n) + 0.5) * stride for n in feat_shape], indexing="ij")
        centers = np.stack([g.ravel() for g in grids], axis=1)
        n_vox = centers.shape[0]
        out = np.empty((n_vox, len(sizes), 6))
        out[:, :, :3] = centers[:, None, :]
        out[:, :, 3:] = np.asarray(sizes)[None, :, None]
        out = out.reshape(-1, 6)
        out.setflags(write=False)
        _ANCHOR_CACHE[key] = out
    return _ANCHOR_CACHE[key]


# -- forward ---------------------------------------------------------------

@dataclass
class RpnOutput:
    logits: np.ndarray      # (N,)
    offsets: np.ndarray     # (N, 6)
    anchors: AnchorGrid

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


@dataclass
class RoiOutput:
    logits: np.ndarray      # (R,)
    offsets: np.ndarray     # (R, 6)

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


@dataclass
class ForwardCache:
    x_shape: tuple
    cols1: np.ndarray
    out1_shape: tuple
    pad1_shape: tuple
    a1: np.ndarray
    cols2: np.ndarray
    out2_shape: tuple
    pad2_shape: tuple
    feature_map: np.ndarray
    extra: dict = field(default_factory=dict)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_patch(patch):
    patch = np.asarray(patch)
    if patch.ndim != 3:
        raise ValueError(f"patch must be 3D, got shape {patch.shape}")
    if any(n % STRIDE for n in patch.shape):
        raise ValueError(f"patch dims {patch.shape} not divisible by stride {STRIDE}; pad first")
    return patch


def backbone_forward(params: DetectorParams, patch):
    patch = _check_patch(patch)
    x = patch.astype(np.float64)[None] / INTENSITY_SCALE
    cols1, out1, pad1 = _im2col(x)
    z1 = params["conv1.w"].reshape(8, -1) @ cols1 + params["conv1.b"][:, None]
    a1 = np.maximum(z1, 0.0).reshape((8,) + out1)
    cols2, out2, pad2 = _im2col(a1)
    z2 = params["conv2.w"].reshape(FEAT_CHANNELS, -1) @ cols2 + params["conv2.b"][:, None]
    fmap = np.maximum(z2, 0.0).reshape((FEAT_CHANNELS,) + out2)
    return ForwardCache(x.shape, cols1, out1, pad1, a1, cols2, out2, pad2, fmap,
                        {"z2": z2.reshape(fmap.shape)})


def rpn_forward(params: DetectorParams, fmap):
    flat = fmap.reshape(FEAT_CHANNELS, -1)
    out = params["rpn.w"] @ flat + params["rpn.b"][:, None]        # (A*7, V)
    out = out.reshape(NUM_ANCHORS, 7, -1).transpose(2, 0, 1).reshape(-1, 7)  # (V*A, 7)
    return RpnOutput(out[:, 0].copy(), out[:, 1:].copy(), AnchorGrid(tuple(fmap.shape[1:])))


def forward(params: DetectorParams, patch):
    """Backbone + RPN. Returns ``(feature_map, RpnOutput)``."""
    cache = backbone_forward(params, patch)
    return cache.feature_map, rpn_forward(params, cache.feature_map)


def roi_region(fmap_shape, box, stride=STRIDE):
    """Slices of feature voxels whose centers fall inside ``box``.

    Falls back to the single feature voxel nearest the box center.
    """
    box = np.asarray(box, dtype=np.float64)
    lo = box[:3] - box[3:] / 2
    hi = box[:3] + box[3:] / 2
    sl = []
    empty = False
    for ax in range(3):
        n = fmap_shape[ax]
        i0 = max(int(math.ceil(lo[ax] / stride - 0.5)), 0)
        i1 = min(int(math.floor(hi[ax] / stride - 0.5)), n - 1)
        if i1 < i0:
            empty = True
        sl.append((i0, i1))
    if empty:
        idx = [min(max(int(math.floor(box[ax] / stride)), 0), fmap_shape[ax] - 1) for ax in range(3)]
        return tuple(slice(i, i + 1) for i in idx)
    return tuple(slice(i0, i1 + 1) for i0, i1 in sl)


def roi_features(feature_map, box) -> np.ndarray:
    """Average-pool the feature map over ``box`` (patch voxel coordinates)."""
    box = box.as_array() if hasattr(box, "as_array") else box
    region = roi_region(feature_map.shape[1:], box)
    return feature_map[(slice(None),) + region].reshape(feature_map.shape[0], -1).mean(axis=1)


def pool_boxes(feature_map, boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    regions = [roi_region(feature_map.shape[1:], b) for b in boxes]
    pooled = np.empty((len(boxes), feature_map.shape[0]))
    for i, region in enumerate(regions):
        pooled[i] = feature_map[(slice(None),) + region].reshape(feature_map.shape[0], -1).mean(axis=1)
    return pooled, regions


def forward_roi(params: DetectorParams, pooled):
    """RoI head on pooled vectors ``(R, 16)`` (or a single 16-vector)."""
    v = np.asarray(pooled, dtype=np.float64)
    single = v.ndim == 1
    v = v.reshape(-1, FEAT_CHANNELS)
    h_pre = v @ params["roi.w1"].T + params["roi.b1"]
    h = np.maximum(h_pre, 0.0)
    out = h @ params["roi.w2"].T + params["roi.b2"]
    res = RoiOutput(out[:, 0].copy(), out[:, 1:].copy())
    if single:
        res = RoiOutput(res.logits[:1], res.offsets[:1])
    return res


# -- proposals -------------------------------------------------------------

@dataclass
class Proposal:
    box: np.ndarray         # (6,)
    score: float
    anchor_index: int


def clip_boxes(boxes, bounds):
    """Clip (N, 6) boxes to ``[0, bounds]`` per axis, keeping a minimum size."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    bounds = np.asarray(bounds, dtype=np.float64)
    lo = np.clip(boxes[:, :3] - boxes[:, 3:] / 2, 0.0, bounds)
    hi = np.clip(boxes[:, :3] + boxes[:, 3:] / 2, 0.0, bounds)
    # degenerate boxes grow inward so they stay within bounds
    lo = np.minimum(lo, bounds - MIN_BOX_SIZE)
    hi = np.maximum(hi, lo + MIN_BOX_SIZE)
    return np.concatenate([(lo + hi) / 2, hi - lo], axis=1)


def propose(rpn: RpnOutput, top_n: int, nms_iou: float, patch_shape=None,
            pre_nms_top_n: int = 512, probs=None) -> list[Proposal]:
    """Decode, clip, NMS and keep the ``top_n`` highest-scoring proposals."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if probs is None:
        probs = rpn.probs
    if patch_shape is None:
        patch_shape = tuple(n * rpn.anchors.stride for n in rpn.anchors.feat_shape)
    order = np.argsort(-probs, kind="stable")[:pre_nms_top_n]
    anchors = rpn.anchors.boxes()[order]
    boxes = clip_boxes(decode_array(rpn.offsets[order], anchors), patch_shape)
    keep = nms_indices(boxes, probs[order], nms_iou)[:top_n]
    return [Proposal(boxes[i], float(probs[order[i]]), int(order[i])) for i in keep]
