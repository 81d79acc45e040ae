"""IoU-based target assignment for anchors or proposals."""

from __future__ import annotations

import numpy as np

from .geom import encode_array, iou_matrix

POS_IOU = 0.3
NEG_IOU = 0.1


def assign_targets(gt_boxes, candidates, pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU):
    """Label candidates 1 (positive), 0 (negative) or -1 (ignored).

    Positive when IoU >= ``pos_iou`` with some ground truth, or when the
    candidate is a ground truth's best match (first index on ties, IoU > 0).
    Negative when the best IoU is < ``neg_iou``. Positives regress towards
    their highest-IoU ground truth (first index on ties).

    Returns ``(labels, offsets, matched)`` where ``matched`` is the matched
    ground-truth index (-1 for non-positives).
    """
    cand = np.asarray(candidates, dtype=np.float64).reshape(-1, 6)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 6)
    n = len(cand)
    labels = np.zeros(n, dtype=np.int64)
    offsets = np.zeros((n, 6))
    matched = -np.ones(n, dtype=np.int64)
    if len(gt) == 0 or n == 0:
        return labels, offsets, matched
    iou = iou_matrix(cand, gt)                    # (n, g)
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[:] = -1
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    best_cand = np.argmax(iou, axis=0)
    forced = best_cand[iou[best_cand, np.arange(len(gt))] > 0]
    labels[forced] = 1
    pos = labels == 1
    matched[pos] = best_gt[pos]
    offsets[pos] = encode_array(gt[best_gt[pos]], cand[pos])
    return labels, offsets, matched


def sample_labels(labels, rng, max_pos: int | None, max_neg: int | None, scores=None,
                  hard_fraction: float = 0.0):
    """Subsample positives/negatives, turning the surplus into ignored (-1).

    A cap of None keeps every instance of that class.
    With ``scores`` and ``hard_fraction > 0``, that share of the negative
    budget goes to the highest-scoring negatives; the rest is drawn uniformly.
    """
    labels = np.array(labels, copy=True)
    pos = np.flatnonzero(labels == 1)
    if max_pos is not None and len(pos) > max_pos:
        drop = rng.choice(pos, len(pos) - max_pos, replace=False)
        labels[drop] = -1
    neg = np.flatnonzero(labels == 0)
    if max_neg is not None and len(neg) > max_neg:
        keep = []
        n_hard = int(round(max_neg * hard_fraction)) if scores is not None else 0
        if n_hard:
            order = neg[np.argsort(-np.asarray(scores)[neg], kind="stable")]
            keep = list(order[:n_hard])
            rest = order[n_hard:]
        else:
            rest = neg
        keep += list(rng.choice(rest, max_neg - len(keep), replace=False))
        mask = np.zeros(len(labels), dtype=bool)
        mask[keep] = True
        labels[(labels == 0) & ~mask] = -1
    return labels
