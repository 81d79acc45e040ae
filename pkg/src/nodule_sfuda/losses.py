"""Loss kernels with hand-derived gradients.

Every kernel returns a :class:`LossOutput` whose ``grads`` mirror the
differentiable inputs. Natural log throughout; similarities and
probabilities are clamped by ``eps`` before any log sees them, and the
clamp is treated as a hard clip (zero gradient outside the interval).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-6
_MIN_NORM = 1e-12
RANK_TIE_TOL = 1e-12


@dataclass
class LossOutput:
    value: float
    grads: Any
    active: bool = True
    terms: dict = field(default_factory=dict)


class InstanceFeatures:
    """Foreground (nodule) and background instance feature vectors.

    Rows are instances; every vector must have norm >= 1e-12.
    """

    def __init__(self, foreground, background, dim: int | None = None):
        fg = _as_matrix(foreground, dim)
        bg = _as_matrix(background, dim if dim is not None else (fg.shape[1] if fg.size else None))
        if fg.shape[0] and bg.shape[0] and fg.shape[1] != bg.shape[1]:
            raise ValueError(f"feature dims differ: {fg.shape[1]} vs {bg.shape[1]}")
        d = fg.shape[1] if fg.shape[0] else bg.shape[1]
        if fg.shape[0] == 0:
            fg = np.zeros((0, d))
        if bg.shape[0] == 0:
            bg = np.zeros((0, d))
        for name, mat in (("foreground", fg), ("background", bg)):
            if mat.size and not np.all(np.isfinite(mat)):
                raise ValueError(f"non-finite {name} feature")
            norms = np.linalg.norm(mat, axis=1)
            if np.any(norms < _MIN_NORM):
                raise ValueError(f"{name} feature with norm < {_MIN_NORM}")
        self.foreground = fg
        self.background = bg

    @property
    def m(self) -> int:
        return self.foreground.shape[0]

    @property
    def k(self) -> int:
        return self.background.shape[0]

    @property
    def dim(self) -> int:
        return self.foreground.shape[1]

    def __repr__(self):
        return f"InstanceFeatures(m={self.m}, k={self.k}, d={self.dim})"


def _as_matrix(vectors, dim):
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.size == 0:
        return np.zeros((0, dim or 0))
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2 or mat.shape[1] < 1:
        raise ValueError(f"feature vectors must form an (n, d) array, got shape {mat.shape}")
    if dim is not None and mat.shape[1] != dim:
        raise ValueError(f"expected feature dim {dim}, got {mat.shape[1]}")
    return mat


@dataclass(frozen=True)
class ContrastiveConfig:
    omega: float = 0.25
    sim_clamp_eps: float = EPS

    def __post_init__(self):
        if not (math.isfinite(self.omega) and self.omega >= 0):
            raise ValueError(f"omega must be finite and >= 0, got {self.omega}")
        if not 0 < self.sim_clamp_eps <= 0.1:
            raise ValueError(f"sim_clamp_eps must be in (0, 0.1], got {self.sim_clamp_eps}")


@dataclass(frozen=True)
class WEConfig:
    tau1: float = 0.25
    tau2: float = 0.75
    gamma: float = 4.0
    alpha: float = 0.1
    detach_modulation: bool = False
    eps: float = EPS

    def __post_init__(self):
        if not (0 < self.tau1 < 1 and 0 < self.tau2 < 1 and self.tau1 < self.tau2):
            raise ValueError(f"need 0 < tau1 < tau2 < 1, got {self.tau1}, {self.tau2}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def cosine_sim(f, g) -> float:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape or f.ndim != 1:
        raise ValueError(f"cosine_sim needs equal-length vectors, got {f.shape} and {g.shape}")
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if nf < _MIN_NORM or ng < _MIN_NORM:
        raise ValueError("cosine_sim of a zero vector")
    return float(np.clip(f @ g / (nf * ng), -1.0, 1.0))


def rank_weights(sims: Sequence[float], omega: float) -> np.ndarray:
    """exp(-omega * rank) with rank 0 for the most similar pair.

    Ties share the smallest rank of their group (competition ranking).
    Similarities within ``RANK_TIE_TOL`` count as tied, so rounding noise
    from rescaling a vector cannot reorder equal pairs.
    """
    sims = np.asarray(sims, dtype=np.float64).ravel()
    if sims.size == 0:
        return np.zeros(0)
    # number of clearly larger similarities == competition rank
    ascending_neg = np.sort(-sims)
    ranks = np.searchsorted(ascending_neg, -(sims + RANK_TIE_TOL), side="left")
    return np.exp(-omega * ranks)


def _normalize(mat):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / norms, norms


def _unit_grad_to_raw(dU, U, norms):
    # d(f/|f|)^T applied to upstream gradient
    return (dU - np.sum(dU * U, axis=1, keepdims=True) * U) / norms


def contrastive_neg_loss(feat: InstanceFeatures, cfg: ContrastiveConfig = ContrastiveConfig()) -> LossOutput:
    m, k = feat.m, feat.k
    grads = (np.zeros_like(feat.foreground), np.zeros_like(feat.background))
    if m == 0 or k == 0:
        return LossOutput(0.0, grads, active=False)
    eps = cfg.sim_clamp_eps
    U, nu = _normalize(feat.foreground)
    V, nv = _normalize(feat.background)
    S = U @ V.T
    Sc = np.clip(S, -1.0 + eps, 1.0 - eps)
    value = -np.sum(np.log1p(-Sc)) / (m * k)
    inside = (S > -1.0 + eps) & (S < 1.0 - eps)
    dS = np.where(inside, 1.0 / (1.0 - Sc), 0.0) / (m * k)
    g_fg = _unit_grad_to_raw(dS @ V, U, nu)
    g_bg = _unit_grad_to_raw(dS.T @ U, V, nv)
    return LossOutput(float(value), (g_fg, g_bg))


def _positive_term(F, omega, eps):
    n = F.shape[0]
    if n < 2:
        return 0.0, np.zeros_like(F), False
    U, nu = _normalize(F)
    S = U @ U.T
    iu = np.triu_indices(n, 1)
    pair_sims = S[iu]
    w = rank_weights(pair_sims, omega)
    W = np.zeros((n, n))
    W[iu] = w
    W = W + W.T
    Sc = np.clip(S, eps, 1.0 - eps)
    off = ~np.eye(n, dtype=bool)
    logs = np.where(off, np.log(Sc), 0.0)
    scale = 1.0 / (n * (n - 1))
    value = -scale * np.sum(W * logs)
    inside = (S > eps) & (S < 1.0 - eps) & off
    dS = np.where(inside, -scale * W / Sc, 0.0)
    # S = U U^T, dS symmetric: dL/dU = (dS + dS^T) U
    dU = (dS + dS.T) @ U
    return float(value), _unit_grad_to_raw(dU, U, nu), True


def contrastive_pos_loss(feat: InstanceFeatures, cfg: ContrastiveConfig = ContrastiveConfig()) -> LossOutput:
    v_fg, g_fg, a_fg = _positive_term(feat.foreground, cfg.omega, cfg.sim_clamp_eps)
    v_bg, g_bg, a_bg = _positive_term(feat.background, cfg.omega, cfg.sim_clamp_eps)
    return LossOutput(v_fg + v_bg, (g_fg, g_bg), active=a_fg or a_bg,
                      terms={"pos_fg": v_fg, "pos_bg": v_bg})


def contrastive_loss(feat: InstanceFeatures, cfg: ContrastiveConfig = ContrastiveConfig()) -> LossOutput:
    neg = contrastive_neg_loss(feat, cfg)
    pos = contrastive_pos_loss(feat, cfg)
    grads = (neg.grads[0] + pos.grads[0], neg.grads[1] + pos.grads[1])
    return LossOutput(neg.value + pos.value, grads, active=neg.active or pos.active,
                      terms={"neg": neg.value, "pos": pos.value})


def bce_loss(p, target, eps: float = EPS) -> LossOutput:
    """Binary cross-entropy, elementwise summed; gradient w.r.t. ``p``."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    pc = np.clip(p, eps, 1.0 - eps)
    value = -np.sum(t * np.log(pc) + (1 - t) * np.log1p(-pc))
    inside = (p > eps) & (p < 1.0 - eps)
    grad = np.where(inside, -t / pc + (1 - t) / (1 - pc), 0.0)
    return LossOutput(float(value), grad)


def smooth_l1(pred, target) -> LossOutput:
    pred = np.asarray(pred, dtype=np.float64)
    x = pred - np.asarray(target, dtype=np.float64)
    ax = np.abs(x)
    value = np.sum(np.where(ax < 1.0, 0.5 * x * x, ax - 0.5))
    grad = np.where(ax < 1.0, x, np.sign(x))
    return LossOutput(float(value), grad)


@dataclass
class DetectionPreds:
    """Probabilities ``(N,)`` and offsets ``(N, 6)`` from one detector stage."""

    probs: np.ndarray
    offsets: np.ndarray


@dataclass
class DetectionTargets:
    """Labels ``(N,)`` in {1, 0, -1 (ignored)} and target offsets ``(N, 6)``."""

    labels: np.ndarray
    offsets: np.ndarray


def _stage_loss(preds: DetectionPreds, targets: DetectionTargets, eps):
    probs = np.asarray(preds.probs, dtype=np.float64)
    offsets = np.asarray(preds.offsets, dtype=np.float64).reshape(-1, 6)
    labels = np.asarray(targets.labels)
    g_p = np.zeros_like(probs)
    g_t = np.zeros_like(offsets)
    used = labels >= 0
    cls = bce_loss(probs[used], labels[used], eps)
    g_p[used] = cls.grads
    pos = labels == 1
    reg = smooth_l1(offsets[pos], np.asarray(targets.offsets).reshape(-1, 6)[pos])
    g_t[pos] = reg.grads
    return cls.value, reg.value, g_p, g_t, int(used.sum())


def sup_detection_loss(rpn_preds: DetectionPreds, roi_preds: DetectionPreds,
                       rpn_targets: DetectionTargets, roi_targets: DetectionTargets,
                       eps: float = EPS) -> LossOutput:
    """Pseudo-supervised two-stage loss: BCE + smooth-L1 at RPN and RoI level.

    Regression is evaluated on positive instances only; label -1 is ignored.
    Gradients are ``((d_rpn_probs, d_rpn_offsets), (d_roi_probs, d_roi_offsets))``.
    """
    rc, rr, rg_p, rg_t, n_rpn = _stage_loss(rpn_preds, rpn_targets, eps)
    oc, orr, og_p, og_t, n_roi = _stage_loss(roi_preds, roi_targets, eps)
    grads = ((rg_p, rg_t), (og_p, og_t))
    if n_rpn + n_roi == 0:
        logger.warning("sup_detection_loss: empty target set, returning 0")
        return LossOutput(0.0, grads, active=False)
    terms = {"rpn_cls": rc, "rpn_reg": rr, "roi_cls": oc, "roi_reg": orr}
    return LossOutput(rc + rr + oc + orr, grads, terms=terms)


def we_loss(probs, cfg: WEConfig = WEConfig()) -> LossOutput:
    """Weighted entropy over RoI nodule probabilities.

    Instances with tau1 <= p <= tau2 contribute nothing; below tau1 the
    entropy term is scaled by (1-alpha) p^gamma, above tau2 by alpha (1-p)^gamma.
    """
    p = np.asarray(probs, dtype=np.float64)
    eps = cfg.eps
    pc = np.clip(p, eps, 1.0 - eps)
    low = pc < cfg.tau1
    high = pc > cfg.tau2
    factor = np.where(low, (1 - cfg.alpha) * pc ** cfg.gamma,
                      np.where(high, cfg.alpha * (1 - pc) ** cfg.gamma, 0.0))
    ent = -pc * np.log(pc)
    value = float(np.sum(factor * ent))
    d_factor = np.where(low, (1 - cfg.alpha) * cfg.gamma * pc ** (cfg.gamma - 1),
                        np.where(high, -cfg.alpha * cfg.gamma * (1 - pc) ** (cfg.gamma - 1), 0.0))
    d_ent = -(np.log(pc) + 1.0)
    grad = factor * d_ent
    if not cfg.detach_modulation:
        grad = grad + d_factor * ent
    inside = (p > eps) & (p < 1.0 - eps)
    grad = np.where(inside, grad, 0.0)
    n_used = int(np.sum(low | high))
    return LossOutput(value, grad, active=n_used > 0, terms={"n_used": n_used})


def student_total_loss(sup: LossOutput, unsup: LossOutput, eta: float) -> LossOutput:
    """eta * sup + unsup, applied to values and (identically shaped) gradients."""
    if not (math.isfinite(eta) and eta >= 0):
        raise ValueError(f"eta must be >= 0, got {eta}")
    return LossOutput(eta * sup.value + unsup.value,
                      _combine(sup.grads, unsup.grads, eta),
                      active=sup.active or unsup.active,
                      terms={"sup": sup.value, "unsup": unsup.value})


def _combine(a, b, eta):
    if isinstance(a, (tuple, list)):
        return type(a)(_combine(x, y, eta) for x, y in zip(a, b))
    return eta * np.asarray(a) + np.asarray(b)
