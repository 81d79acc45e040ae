import numpy as np
from hypothesis import given, settings, strategies as st

from nodule_sfuda.geom import Box3, iou3d
from nodule_sfuda.targets import assign_targets, sample_labels


def test_no_ground_truth_all_negative():
    labels, offsets, matched = assign_targets(np.zeros((0, 6)), np.ones((5, 6)))
    assert labels.tolist() == [0] * 5
    assert not offsets.any() and matched.tolist() == [-1] * 5


def test_identical_anchor_positive_zero_offsets():
    box = [8, 8, 8, 6, 6, 6]
    labels, offsets, matched = assign_targets([box], [box, [30, 30, 30, 6, 6, 6]])
    assert labels.tolist() == [1, 0]
    assert np.allclose(offsets[0], 0) and matched.tolist() == [0, -1]


def test_argmax_anchor_forced_positive():
    gt = [0, 0, 0, 4, 4, 4]
    # best IoU below pos threshold but non-zero -> still positive
    labels, _, _ = assign_targets([gt], [[2.5, 0, 0, 4, 4, 4], [20, 0, 0, 4, 4, 4]])
    assert labels.tolist() == [1, 0]


def brute_labels(gt, cand, pos, neg):
    out = []
    best_for_gt = []
    for g in gt:
        ious = [iou3d(Box3(c[:3], c[3:]), Box3(g[:3], g[3:])) for c in cand]
        j = int(np.argmax(ious))
        best_for_gt.append(j if ious[j] > 0 else None)
    for i, c in enumerate(cand):
        ious = [iou3d(Box3(c[:3], c[3:]), Box3(g[:3], g[3:])) for g in gt]
        m = max(ious)
        lab = 1 if m >= pos else (0 if m < neg else -1)
        if i in best_for_gt:
            lab = 1
        out.append(lab)
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4), st.integers(1, 20))
def test_assignment_matches_brute_force(seed, n_gt, n_cand):
    rng = np.random.default_rng(seed)
    gt = np.concatenate([rng.uniform(0, 12, (n_gt, 3)), rng.uniform(2, 6, (n_gt, 3))], 1)
    cand = np.concatenate([rng.uniform(0, 12, (n_cand, 3)), rng.uniform(2, 6, (n_cand, 3))], 1)
    labels, _, _ = assign_targets(gt, cand, 0.3, 0.1)
    assert labels.tolist() == brute_labels(gt, cand, 0.3, 0.1)


def test_sample_labels_caps():
    rng = np.random.default_rng(0)
    labels = np.array([1] * 10 + [0] * 50 + [-1] * 5)
    out = sample_labels(labels, rng, 4, 12)
    assert (out == 1).sum() == 4 and (out == 0).sum() == 12
    assert np.all(out[labels == -1] == -1)
    assert np.array_equal(sample_labels(labels, rng, None, None), labels)


def test_sample_labels_hard_negatives():
    labels = np.zeros(20, int)
    scores = np.arange(20) / 20
    out = sample_labels(labels, np.random.default_rng(0), None, 5, scores, hard_fraction=0.6)
    kept = np.flatnonzero(out == 0)
    assert len(kept) == 5 and {19, 18, 17} <= set(kept.tolist())
