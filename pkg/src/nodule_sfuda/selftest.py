"""Seeded invariant checks run by ``nodule-sfuda selftest``."""

from __future__ import annotations

import numpy as np

from . import losses as L
from .adapt import AdaptConfig, TeacherStudent, ema_update, make_pseudo_labels
from .data import PAD_VALUE, crop_patches, hu_clip_rescale, pad_value, split_counts
from .detector.model import init_params
from .froc import brute_force_froc, evaluate
from .geom import Annotation, Box3, Detection, center_hit, iou3d, nms


def _check(name, passed, detail=""):
    return {"name": name, "passed": bool(passed), "detail": detail}


def random_froc_case(rng, max_scans=5, max_dets=8):
    anns, dets = {}, {}
    for s in range(int(rng.integers(1, max_scans + 1))):
        sid = f"s{s}"
        anns[sid] = [Annotation(tuple(rng.integers(0, 12, 3).astype(float)), float(rng.choice([2, 3, 4.5])))
                     for _ in range(int(rng.integers(0, 3)))]
        dets[sid] = [Detection(Box3(tuple(rng.integers(0, 12, 3).astype(float)), (2, 2, 2)),
                               float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9])))
                     for _ in range(int(rng.integers(0, max_dets + 1)))]
    if not any(anns.values()):
        anns["s0"] = [Annotation((5.0, 5.0, 5.0), 3.0)]
    return dets, anns


def froc_oracle_agreement(rng, n=50):
    """Fast evaluator vs brute-force threshold enumeration on ``n`` random instances."""
    bad = 0
    for _ in range(n):
        dets, anns = random_froc_case(rng)
        fast, _ = evaluate(dets, anns)
        if fast.sensitivities != brute_force_froc(dets, anns).sensitivities:
            bad += 1
    return bad


def worked_froc_example():
    anns = {"a": [Annotation((10, 10, 10), 5)]}
    dets = {"a": [Detection(Box3((11, 10, 10), (4, 4, 4)), 0.9),
                  Detection(Box3((30, 30, 30), (4, 4, 4)), 0.8)]}
    res, curve = evaluate(dets, anns)
    return res, curve


def _brute_nms(dets, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(iou3d(dets[i].box, dets[j].box) < thr for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def run_selftest(seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []

    # EMA: convex combination, fixed point when teacher == student
    a, b = init_params(seed), init_params(seed + 1)
    beta = 0.9996
    mixed = ema_update(TeacherStudent(a, b), beta)
    lo, hi = np.minimum(a.flat, b.flat), np.maximum(a.flat, b.flat)
    out.append(_check("ema_convex", np.all(mixed.flat >= lo - 1e-15) and np.all(mixed.flat <= hi + 1e-15)))
    out.append(_check("ema_fixed_point", ema_update(TeacherStudent(a, a.copy()), beta) == a))

    # pseudo labels shrink as delta grows
    patch = rng.integers(0, 256, (16, 16, 16)).astype(np.uint8)
    counts = [len(make_pseudo_labels(a, patch, AdaptConfig(delta=d))) for d in (0.0, 0.01, 0.3, 0.7, 1.0)]
    out.append(_check("pseudo_label_delta_antitone", counts == sorted(counts, reverse=True), str(counts)))

    # WE: zero inside the dead zone, factors monotone outside
    cfg = L.WEConfig()
    zone = np.linspace(cfg.tau1, cfg.tau2, 101)
    grid_lo = np.linspace(1e-3, cfg.tau1 - 1e-3, 200)
    grid_hi = np.linspace(cfg.tau2 + 1e-3, 1 - 1e-3, 200)
    f_lo = (1 - cfg.alpha) * grid_lo ** cfg.gamma
    f_hi = cfg.alpha * (1 - grid_hi) ** cfg.gamma
    out.append(_check("we_dead_zone_zero", L.we_loss(zone, cfg).value == 0.0))
    out.append(_check("we_factor_monotone", np.all(np.diff(f_lo) > 0) and np.all(np.diff(f_hi) < 0)))

    # contrastive: invariant to positive rescaling and to instance order
    F = rng.normal(size=(5, 16))
    G = rng.normal(size=(7, 16))
    base = L.contrastive_loss(L.InstanceFeatures(F, G, 16)).value
    scaled = L.contrastive_loss(L.InstanceFeatures(3.5 * F, 0.2 * G, 16)).value
    perm = L.contrastive_loss(L.InstanceFeatures(F[rng.permutation(5)], G[rng.permutation(7)], 16)).value
    out.append(_check("contrastive_scale_invariant", abs(base - scaled) <= 1e-9 * max(1, abs(base))))
    out.append(_check("contrastive_permutation_invariant", abs(base - perm) <= 1e-9 * max(1, abs(base))))

    # NMS vs the direct greedy definition
    nms_bad = 0
    for _ in range(50):
        dets = [Detection(Box3(tuple(rng.integers(0, 6, 3).astype(float)), (3, 3, 3)), float(rng.random()))
                for _ in range(int(rng.integers(0, 8)))]
        if nms(dets, 0.3) != _brute_nms(dets, 0.3):
            nms_bad += 1
    out.append(_check("nms_brute_force", nms_bad == 0, f"{nms_bad} mismatches"))

    # hit criterion under translation
    hit_bad = 0
    for _ in range(200):
        c, ac, shift = rng.uniform(-20, 20, (3, 3))
        r = float(rng.uniform(0.5, 10))
        d = Detection(Box3(tuple(c), (2, 2, 2)), 0.5)
        ann = Annotation(tuple(ac), r)
        moved = Detection(d.box.translated(tuple(shift)), 0.5)
        if center_hit(d, ann) != center_hit(moved, Annotation(tuple(ac + shift), r)):
            hit_bad += 1
    out.append(_check("hit_translation_invariant", hit_bad == 0))

    # FROC
    bad = froc_oracle_agreement(rng)
    out.append(_check("froc_brute_force", bad == 0, f"{bad} mismatches"))
    res, _ = worked_froc_example()
    out.append(_check("froc_worked_example", res.average == 1.0, str(res.sensitivities)))

    # preprocessing
    ends = hu_clip_rescale(np.array([[[-1200.0, 600.0]]])).ravel().tolist()
    out.append(_check("hu_endpoints", ends == [0, 255], str(ends)))
    out.append(_check("pad_value", pad_value() == PAD_VALUE == 170))
    out.append(_check("split_7_1_2", split_counts(100) == (70, 10, 20) and split_counts(10) == (7, 1, 2)))
    vol = rng.integers(0, 256, (20, 9, 13)).astype(np.uint8)
    covered = np.zeros(vol.shape, bool)
    exact = True
    for p, (z, y, x) in crop_patches(vol, 8, 0):
        sub = p[: vol.shape[0] - z, : vol.shape[1] - y, : vol.shape[2] - x]
        exact &= np.array_equal(sub, vol[z:z + 8, y:y + 8, x:x + 8])
        covered[z:z + 8, y:y + 8, x:x + 8] = True
    out.append(_check("patch_coverage", covered.all() and exact))
    return out


__all__ = ["run_selftest", "froc_oracle_agreement", "worked_froc_example", "random_froc_case"]
