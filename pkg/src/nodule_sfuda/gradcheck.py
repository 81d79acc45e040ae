"""Central finite-difference checks for the loss kernels and the full detector.

Kernel checks perturb every input coordinate with step ``h`` and compare
the whole gradient with ``|a - n| / max(|a|, |n|, floor)`` taken over the
vector (2-norm). Random instances that land within ``margin`` of a
non-smooth point (clamp edges, |x| = 1 in smooth-L1, the WE thresholds,
near-tied pair similarities whose rank could flip) are redrawn, as are
contrastive instances whose log argument sits within ``POLE_MARGIN`` of
zero: there the third derivative swamps a central difference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses as L
from .detector.backprop import LossSpec, PatchTask, loss_gradient, loss_value
from .detector.model import (MANIFEST, AnchorGrid, DetectorParams, backbone_forward, init_params,
                             pool_boxes)

KERNEL_TOL = 1e-4
DETECTOR_TOL = 1e-3
FLOOR = 1e-10
POLE_MARGIN = 1e-2


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.instances > 0 and self.max_rel_err <= self.tol

    def as_dict(self) -> dict:
        return {"name": self.name, "instances": self.instances, "max_rel_err": self.max_rel_err,
                "tol": self.tol, "passed": self.passed}


def numeric_grad(fn, x, h):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


# -- random instances --------------------------------------------------------

def _pair_sims(F):
    U = F / np.linalg.norm(F, axis=1, keepdims=True)
    S = U @ U.T
    return S[np.triu_indices(len(F), 1)]


def _features_ok(fg, bg, eps, margin, pole=POLE_MARGIN):
    if len(fg) and len(bg):
        U = fg / np.linalg.norm(fg, axis=1, keepdims=True)
        V = bg / np.linalg.norm(bg, axis=1, keepdims=True)
        S = U @ V.T
        if np.any(np.abs(np.abs(S) - (1 - eps)) < margin) or np.any(np.abs(S - 1) < pole):
            return False
    for F in (fg, bg):
        if len(F) < 2:
            continue
        s = _pair_sims(F)
        if np.any(np.abs(s - eps) < margin) or np.any(np.abs(s - (1 - eps)) < margin):
            return False
        if np.any(np.abs(s) < pole) or np.any(np.abs(s - 1) < pole):
            return False
        srt = np.sort(s)
        if np.any(np.diff(srt) < margin):
            return False
    return True


def _random_features(rng, eps, margin, m_range=(0, 6), k_range=(0, 6)):
    while True:
        d = int(rng.integers(2, 9))
        m = int(rng.integers(*m_range, endpoint=True))
        k = int(rng.integers(*k_range, endpoint=True))
        # mixed-sign features exercise the negative-similarity clamp too
        fg = rng.normal(size=(m, d)) + (rng.uniform(0, 1.5) if rng.random() < 0.5 else 0.0)
        bg = rng.normal(size=(k, d))
        if _features_ok(fg, bg, eps, margin):
            return fg, bg


def _random_probs(rng, n, cuts, margin):
    while True:
        p = rng.uniform(0.005, 0.995, size=n)
        if all(np.all(np.abs(p - c) > margin) for c in cuts):
            return p


def _random_offsets(rng, n, target, margin):
    while True:
        t = rng.normal(scale=1.2, size=(n, 6))
        if np.all(np.abs(np.abs(t - target) - 1.0) > margin):
            return t


def _random_det_problem(rng, margin):
    n_rpn, n_roi = int(rng.integers(1, 9)), int(rng.integers(0, 6))
    out = []
    for n in (n_rpn, n_roi):
        labels = rng.integers(-1, 2, size=n)
        if n and not out:
            labels[0] = 1
        tgt = rng.normal(size=(n, 6))
        out.append((_random_probs(rng, n, (), margin), _random_offsets(rng, n, tgt, margin),
                    L.DetectionTargets(labels, tgt)))
    return out


# -- kernel checks -----------------------------------------------------------

def _check_contrastive(fn, name, n, rng, h, margin, grads_of):
    cfg = L.ContrastiveConfig()
    worst, done = 0.0, 0
    while done < n:
        fg, bg = _random_features(rng, cfg.sim_clamp_eps, margin)
        out = fn(L.InstanceFeatures(fg, bg, dim=fg.shape[1]), cfg)
        if not grads_of(out):
            continue
        m = len(fg)
        x = np.concatenate([fg, bg])

        def f(z):
            return fn(L.InstanceFeatures(z[:m], z[m:], dim=z.shape[1]), cfg).value

        analytic = np.concatenate(out.grads)
        worst = max(worst, rel_error(analytic, numeric_grad(f, x, h)))
        done += 1
    return CheckResult(name, done, worst, KERNEL_TOL)


def check_kernels(n_instances: int = 100, seed: int = 0, h: float = 1e-5,
                  margin: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    active = lambda out: out.active  # noqa: E731

    for fn, name in ((L.contrastive_neg_loss, "contrastive_neg"),
                     (L.contrastive_pos_loss, "contrastive_pos"),
                     (L.contrastive_loss, "contrastive")):
        t = time.perf_counter()
        r = _check_contrastive(fn, name, n_instances, rng, h, margin, active)
        r.seconds = time.perf_counter() - t
        results.append(r)

    t = time.perf_counter()
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 20))
        p = _random_probs(rng, n, (), margin)
        y = rng.integers(0, 2, size=n).astype(float)
        worst = max(worst, rel_error(L.bce_loss(p, y).grads,
                                     numeric_grad(lambda z: L.bce_loss(z, y).value, p, h)))
    results.append(CheckResult("bce", n_instances, worst, KERNEL_TOL, time.perf_counter() - t))

    t = time.perf_counter()
    worst = 0.0
    for _ in range(n_instances):
        tgt = rng.normal(size=6)
        pred = _random_offsets(rng, 1, tgt, margin)[0]
        worst = max(worst, rel_error(L.smooth_l1(pred, tgt).grads,
                                     numeric_grad(lambda z: L.smooth_l1(z, tgt).value, pred, h)))
    results.append(CheckResult("smooth_l1", n_instances, worst, KERNEL_TOL, time.perf_counter() - t))

    t = time.perf_counter()
    worst = 0.0
    for _ in range(n_instances):
        (rp, rt, rtg), (op, ot, otg) = _random_det_problem(rng, margin)
        sizes = [rp.size, rt.size, op.size, ot.size]

        def unpack(z):
            parts = np.split(z, np.cumsum(sizes)[:-1])
            return (L.DetectionPreds(parts[0], parts[1].reshape(-1, 6)),
                    L.DetectionPreds(parts[2], parts[3].reshape(-1, 6)))

        def f(z):
            a, b = unpack(z)
            return L.sup_detection_loss(a, b, rtg, otg).value

        x = np.concatenate([rp, rt.ravel(), op, ot.ravel()])
        a, b = unpack(x)
        out = L.sup_detection_loss(a, b, rtg, otg)
        (g1, g2), (g3, g4) = out.grads
        analytic = np.concatenate([g1, g2.ravel(), g3, g4.ravel()])
        worst = max(worst, rel_error(analytic, numeric_grad(f, x, h)))
    results.append(CheckResult("sup_detection", n_instances, worst, KERNEL_TOL, time.perf_counter() - t))

    t = time.perf_counter()
    worst = 0.0
    cfg = L.WEConfig()
    for _ in range(n_instances):
        p = _random_probs(rng, int(rng.integers(1, 20)), (cfg.tau1, cfg.tau2), margin)
        worst = max(worst, rel_error(L.we_loss(p, cfg).grads,
                                     numeric_grad(lambda z: L.we_loss(z, cfg).value, p, h)))
    results.append(CheckResult("weighted_entropy", n_instances, worst, KERNEL_TOL, time.perf_counter() - t))

    t = time.perf_counter()
    worst = 0.0
    for _ in range(n_instances):
        eta = float(rng.uniform(0, 2))
        p = _random_probs(rng, int(rng.integers(1, 10)), (cfg.tau1, cfg.tau2), margin)
        y = rng.integers(0, 2, size=p.size).astype(float)

        def f(z):
            return L.student_total_loss(L.bce_loss(z, y), L.we_loss(z, cfg), eta).value

        out = L.student_total_loss(L.bce_loss(p, y), L.we_loss(p, cfg), eta)
        worst = max(worst, rel_error(out.grads, numeric_grad(f, p, h)))
    results.append(CheckResult("student_total", n_instances, worst, KERNEL_TOL, time.perf_counter() - t))
    return results


# -- full detector -----------------------------------------------------------

def _random_boxes(rng, n, side):
    c = rng.uniform(2, side - 2, size=(n, 3))
    s = rng.uniform(3, side / 2, size=(n, 3))
    return np.concatenate([c, s], axis=1)


def random_batch(rng, kind: str, side: int = 16, n_patches: int = 2) -> list[PatchTask]:
    """Small random patches with random (fixed) boxes and targets for ``kind``."""
    n_anchors = len(AnchorGrid((side // 4,) * 3).boxes())
    tasks = []
    for _ in range(n_patches):
        patch = rng.integers(0, 256, size=(side,) * 3).astype(np.float64)
        task = PatchTask(patch)
        if kind == "contrastive":
            task.fg_boxes = _random_boxes(rng, 3, side)
            task.bg_boxes = _random_boxes(rng, 4, side)
        else:
            task.rpn_labels = rng.integers(-1, 2, size=n_anchors)
            task.rpn_offsets = rng.normal(scale=0.3, size=(n_anchors, 6))
            task.roi_boxes = _random_boxes(rng, 5, side)
            task.roi_labels = rng.integers(0, 2, size=5)
            task.roi_offsets = rng.normal(scale=0.3, size=(5, 6))
            if kind == "student":
                task.we_boxes = _random_boxes(rng, 6, side)
        tasks.append(task)
    return tasks


def random_params(rng, seed: int = 0) -> DetectorParams:
    """Initialised weights plus noise, so every layer carries signal."""
    p = init_params(seed)
    flat = p.flat + rng.normal(scale=0.05, size=p.size)
    return DetectorParams(flat, p.manifest)


def _kink_signature(params, batch, pre_features=False):
    """Every ReLU on/off pattern and contrastive rank order the loss depends on."""
    parts = []
    for task in batch:
        cache = backbone_forward(params, task.patch)
        inst_map = cache.extra["z2"] if pre_features else cache.feature_map
        parts += [cache.a1 > 0, cache.feature_map > 0]
        for boxes in (task.roi_boxes, task.we_boxes):
            if boxes is not None and len(boxes):
                pooled, _ = pool_boxes(cache.feature_map, boxes)
                parts.append(pooled @ params["roi.w1"].T + params["roi.b1"] > 0)
        for boxes in (task.fg_boxes, task.bg_boxes):
            if boxes is not None and len(boxes) > 1:
                pooled, _ = pool_boxes(inst_map, boxes)
                parts.append(np.argsort(-_pair_sims(pooled), kind="stable"))
    return [np.asarray(x).ravel() for x in parts]


def _same_signature(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# name -> (loss kind, extra LossSpec fields)
DETECTOR_VARIANTS = {
    "contrastive": ("contrastive", {}),
    "contrastive_pre": ("contrastive", {"contrastive_features": "pre"}),
    "supervised": ("supervised", {}),
    "student": ("student", {}),
    "student_mean": ("student", {"normalize": True}),
}


def check_detector(seed: int = 0, coords_per_layer: int = 20, h: float = 1e-4,
                   variants=tuple(DETECTOR_VARIANTS), floor: float = 1e-6) -> list[CheckResult]:
    """Per loss kind: sampled coordinates of every layer vs central differences.

    A coordinate whose +-h perturbation flips a ReLU or a rank is a
    non-smooth point for the difference quotient and is replaced by another.
    """
    rng = np.random.default_rng(seed)
    results = []
    offsets = np.cumsum([0] + [int(np.prod(s)) for _, s in MANIFEST])
    for name in variants:
        kind, extra = DETECTOR_VARIANTS[name]
        pre = extra.get("contrastive_features") == "pre"
        t = time.perf_counter()
        params = random_params(rng, seed)
        batch = random_batch(rng, kind)
        # alpha/gamma chosen so the WE term is not negligible next to the supervised one
        spec = LossSpec(kind, eta=0.7, we=L.WEConfig(alpha=0.5, gamma=2.0), **extra)
        grad = loss_gradient(params, batch, spec).grad
        worst, count = 0.0, 0
        for li in range(len(MANIFEST)):
            lo, hi = offsets[li], offsets[li + 1]
            want = min(coords_per_layer, hi - lo)
            got = 0
            for i in rng.permutation(np.arange(lo, hi)):
                if got == want:
                    break
                up, down = params.copy(), params.copy()
                up.flat[i] += h
                down.flat[i] -= h
                if not _same_signature(_kink_signature(up, batch, pre), _kink_signature(down, batch, pre)):
                    continue
                num = (loss_value(up, batch, spec) - loss_value(down, batch, spec)) / (2 * h)
                err = abs(grad[i] - num) / max(abs(grad[i]), abs(num), floor)
                worst = max(worst, err)
                got += 1
            count += got
        results.append(CheckResult(f"detector_{name}", count, worst, DETECTOR_TOL, time.perf_counter() - t))
    return results


def run_all(seed: int = 0, n_instances: int = 100, coords_per_layer: int = 20) -> list[CheckResult]:
    return check_kernels(n_instances, seed) + check_detector(seed, coords_per_layer)
