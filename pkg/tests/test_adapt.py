import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodule_sfuda.adapt import (AdaptConfig, PseudoNodule, TeacherStudent, adapt_pipeline,
                                auto_label_instances, ema_update, make_pseudo_labels, step1_adapt,
                                step2_adapt)
from nodule_sfuda.data import SynthDomainSpec, gen_synth_scan
from nodule_sfuda.detector import DetectorParams, init_params
from nodule_sfuda.detector.model import Proposal
from nodule_sfuda.detector.train import DetectorConfig
from nodule_sfuda.gradcheck import random_params

MOCK = (("w", (2,)),)


def mock(values):
    return DetectorParams(np.asarray(values, float), MOCK)


def test_defaults():
    cfg = AdaptConfig()
    assert (cfg.delta, cfg.beta, cfg.eta, cfg.epochs) == (0.7, 0.9996, 1.0, 100)
    assert (cfg.t_fg, cfg.t_bg, cfg.max_fg, cfg.max_bg) == (0.9, 0.1, 16, 32)
    assert (cfg.we.gamma, cfg.we.alpha) == (4.0, 0.1)


def test_config_validation():
    for bad in ({"t_fg": 0.1, "t_bg": 0.2}, {"delta": 1.5}, {"beta": -0.1}, {"max_fg": 17}):
        with pytest.raises(ValueError):
            AdaptConfig(**bad)
    with pytest.raises(ValueError):
        AdaptConfig.from_dict({"we": {"gama": 2}})
    with pytest.raises(ValueError):
        AdaptConfig.from_dict({"detla": 0.5})
    assert AdaptConfig.from_dict(AdaptConfig().to_dict()) == AdaptConfig()


def _props(scores):
    return [Proposal(np.array([8.0, 8, 8, 6, 6, 6]), s, i) for i, s in enumerate(scores)]


def test_auto_label_examples():
    fmap = np.ones((16, 4, 4, 4))
    feat = auto_label_instances(_props([0.5] * 5), fmap, AdaptConfig())
    assert (feat.m, feat.k) == (0, 0)
    feat = auto_label_instances(_props([0.95, 0.05]), fmap, AdaptConfig())
    assert (feat.m, feat.k) == (1, 1)
    feat = auto_label_instances(_props([0.99] * 40), fmap, AdaptConfig())
    assert feat.m == 16


def test_fg_cap_keeps_highest():
    from nodule_sfuda.adapt import select_instances
    scores = sorted(np.linspace(0.91, 0.99, 40), reverse=True)
    props = [Proposal(np.array([4.0 * (i % 4) + 2, 6, 6, 4, 4, 4]), s, i) for i, s in enumerate(scores)]
    fg, _ = select_instances(props, np.ones((16, 4, 4, 4)), AdaptConfig(), np.random.default_rng(0))
    assert len(fg) == 16
    assert np.array_equal(fg, np.asarray([p.box for p in props[:16]]))


def test_ema_examples():
    ts = TeacherStudent(mock([1, 2]), mock([0, 0]))
    assert np.allclose(ema_update(ts, 0.9).flat, [0.9, 1.8])
    assert ema_update(ts, 1.0) == ts.teacher
    same = TeacherStudent(mock([3, -1]), mock([3, -1]))
    assert ema_update(same, 0.37) == same.teacher
    with pytest.raises(ValueError):
        ema_update(ts, 1.5)
    with pytest.raises(ValueError):
        TeacherStudent(mock([1, 2]), init_params(0))


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), st.floats(0, 1))
def test_ema_convex(t, s, beta):
    out = ema_update(TeacherStudent(mock(t), mock(s)), beta).flat
    lo, hi = np.minimum(t, s), np.maximum(t, s)
    assert np.all(out >= lo - 1e-9 * (1 + np.abs(lo))) and np.all(out <= hi + 1e-9 * (1 + np.abs(hi)))


def test_ema_closed_form_recurrence():
    rng = np.random.default_rng(0)
    beta = 0.8
    teacher = mock([1.0, -2.0])
    traj = [rng.normal(size=2) for _ in range(12)]
    for s in traj:
        teacher = ema_update(TeacherStudent(teacher, mock(s)), beta)
    n = len(traj)
    expected = beta ** n * np.array([1.0, -2.0])
    expected += sum((1 - beta) * beta ** (n - 1 - k) * s for k, s in enumerate(traj))
    assert np.allclose(teacher.flat, expected, atol=1e-12)


def test_pseudo_labels_delta_contract():
    rng = np.random.default_rng(1)
    for trial in range(8):
        p = random_params(rng, trial)
        flat = p.flat.copy()
        flat[p.slices["rpn.b"]] += rng.normal(scale=2.0, size=flat[p.slices["rpn.b"]].shape)
        p = DetectorParams(flat)
        patch = rng.integers(0, 256, (16, 16, 16)).astype(np.uint8)
        prev = None
        for delta in (1.0, 0.9, 0.7, 0.5, 0.2, 0.0):
            labels = make_pseudo_labels(p, patch, AdaptConfig(delta=delta))
            assert all(q.score >= delta for q in labels)
            key = {(tuple(q.box.as_array()), q.score) for q in labels}
            if prev is not None:
                assert prev <= key
            prev = key
        assert all(q.score < 1.0 for q in make_pseudo_labels(p, patch, AdaptConfig(delta=0.0)))


def _scans(n=4, side=32, seed=3):
    spec = SynthDomainSpec(name="t", side=side, radius_min=2, radius_max=5, seed=seed)
    return [gen_synth_scan(spec, i) for i in range(n)]


DET = DetectorConfig(batch_size=4, patch_side=16)


def test_step1_zero_epochs_and_determinism():
    src = random_params(np.random.default_rng(0))
    scans = _scans()
    out, hist = step1_adapt(src, scans, AdaptConfig(epochs=0), DET, seed=1)
    assert out == src and hist == []
    a, ha = step1_adapt(src, scans, AdaptConfig(epochs=2, t_fg=0.5), DET, seed=1)
    b, hb = step1_adapt(src, scans, AdaptConfig(epochs=2, t_fg=0.5), DET, seed=1)
    assert a == b and ha == hb
    with pytest.raises(ValueError):
        step1_adapt(src, [], AdaptConfig(), DET, seed=0)


def test_step1_inactive_terms_leave_params_unchanged():
    src = random_params(np.random.default_rng(0))
    # nothing reaches t_fg = 1 and nothing is <= t_bg = 0
    out, hist = step1_adapt(src, _scans(), AdaptConfig(epochs=2, t_fg=1.0, t_bg=0.0), DET, seed=2)
    assert out == src
    assert all(h["steps"] == 0 for h in hist)


def test_step1_freezes_roi_head():
    src = random_params(np.random.default_rng(0))
    out, hist = step1_adapt(src, _scans(), AdaptConfig(epochs=1, t_fg=0.3, t_bg=0.2), DET, seed=2)
    roi = src.layer_mask(("roi",))
    assert np.array_equal(out.flat[roi], src.flat[roi])
    assert hist[0]["steps"] > 0 and out != src


def test_step2_null_update():
    p = init_params(0)
    flat = p.flat.copy()
    flat[p.slices["roi.w2"]] = 0
    flat[p.slices["roi.b2"]] = 0    # every RoI probability 0.5: WE dead zone
    p = DetectorParams(flat)
    cfg = AdaptConfig(epochs=1, beta=1.0, delta=1.0)
    student, teacher, hist = step2_adapt(p, _scans(), cfg, DET, seed=0)
    assert student == p and teacher == p
    assert hist[0]["pseudo"] == 0 and hist[0]["steps"] == 0


def test_step2_updates_and_is_deterministic():
    p = random_params(np.random.default_rng(4), 4)
    cfg = AdaptConfig(epochs=2, delta=0.0, beta=0.5)
    s1, t1, h1 = step2_adapt(p, _scans(), cfg, DET, seed=5)
    s2, t2, h2 = step2_adapt(p, _scans(), cfg, DET, seed=5)
    assert s1 == s2 and t1 == t2 and h1 == h2
    assert s1 != p and t1 != p
    assert all(h["pseudo"] > 0 for h in h1)


def test_pipeline_report_reproducible():
    p = random_params(np.random.default_rng(6), 6)
    scans = _scans()
    cfg = AdaptConfig(epochs=1, t_fg=0.5, delta=0.3)
    outs = [adapt_pipeline(p, scans, cfg, DET, seed=9, eval_scans=scans[:2]) for _ in range(2)]
    dumps = [json.dumps(r, sort_keys=True) for _, r in outs]
    assert dumps[0] == dumps[1]
    assert outs[0][0] == outs[1][0]
    report = outs[0][1]
    assert len(report["pseudo_counts"]) == cfg.epochs
    assert set(report["froc"]) == {"source", "step1", "step2"}
    with pytest.raises(ValueError):
        adapt_pipeline(p, scans, cfg, DET, seed=0, steps="3")


def test_pseudo_nodule_fields():
    from nodule_sfuda.geom import Box3
    q = PseudoNodule(Box3((1, 2, 3), (2, 2, 2)), 0.8)
    assert q.score == 0.8
