import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodule_sfuda.detector import (MANIFEST, AnchorGrid, DetectorParams, LossSpec, NonFiniteLossError,
                                   OptimState, PatchTask, forward, forward_roi, init_params,
                                   load_checkpoint, loss_gradient, propose, roi_features,
                                   save_checkpoint, sgd_step)
from nodule_sfuda.detector.model import RpnOutput, backbone_forward, clip_boxes
from nodule_sfuda.detector.train import DetectorConfig, train_source
from nodule_sfuda.gradcheck import check_detector, random_batch, random_params
from nodule_sfuda import losses as L
from nodule_sfuda.data import SynthDomainSpec, gen_synth_scan


def zero_params():
    return DetectorParams(np.zeros(init_params(0).size))


def test_zero_params_give_half_probabilities():
    fmap, rpn = forward(zero_params(), np.zeros((16, 16, 16), np.uint8))
    assert np.all(rpn.probs == 0.5)
    assert fmap.shape == (16, 4, 4, 4)


def test_shapes_for_32_cube():
    fmap, rpn = forward(init_params(0), np.full((32, 32, 32), 100, np.uint8))
    assert fmap.shape == (16, 8, 8, 8)
    assert rpn.logits.shape == (8 ** 3 * 3,)
    assert rpn.offsets.shape == (8 ** 3 * 3, 6)


def test_forward_deterministic_and_rejects_bad_dims():
    p = init_params(1)
    patch = np.random.default_rng(0).integers(0, 256, (16, 16, 16)).astype(np.uint8)
    a, b = forward(p, patch), forward(p, patch.copy())
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].logits, b[1].logits)
    with pytest.raises(ValueError):
        forward(p, np.zeros((15, 16, 16)))


def test_stride_translation_consistency():
    rng = np.random.default_rng(3)
    p = random_params(rng, 3)
    vol = rng.integers(0, 256, (36, 32, 32)).astype(np.uint8)
    f0 = backbone_forward(p, vol[:32]).feature_map
    f1 = backbone_forward(p, vol[4:36]).feature_map
    # interior only: the padded border differs
    assert np.allclose(f1[:, 1:-2, 1:-1, 1:-1], f0[:, 2:-1, 1:-1, 1:-1], atol=1e-9)


def test_anchor_grid():
    g = AnchorGrid((2, 2, 2))
    boxes = g.boxes()
    assert g.count == 24 == len(boxes)
    assert np.allclose(boxes[0], [2, 2, 2, 6, 6, 6])
    assert np.allclose(boxes[2], [2, 2, 2, 16, 16, 16])
    assert np.allclose(boxes[-1, :3], [6, 6, 6])


def _rpn(logits, shape=(2, 2, 2)):
    n = len(logits)
    return RpnOutput(np.asarray(logits, float), np.zeros((n, 6)), AnchorGrid(shape))


def test_propose_dominant_anchor_first():
    logits = np.full(24, -3.0)
    logits[13] = 5.0
    props = propose(_rpn(logits), 5, 0.1)
    assert props[0].anchor_index == 13
    assert props[0].score == pytest.approx(1 / (1 + np.exp(-5)))


def test_propose_uniform_scores_deterministic():
    a = propose(_rpn(np.zeros(24)), 4, 0.5)
    b = propose(_rpn(np.zeros(24)), 4, 0.5)
    assert len(a) == 4
    assert [p.anchor_index for p in a] == [p.anchor_index for p in b]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_propose_count_and_bounds(seed, top_n):
    rng = np.random.default_rng(seed)
    rpn = RpnOutput(rng.normal(size=24), rng.normal(scale=0.5, size=(24, 6)), AnchorGrid((2, 2, 2)))
    props = propose(rpn, top_n, 0.3)
    assert len(props) <= top_n
    for q in props:
        lo, hi = q.box[:3] - q.box[3:] / 2, q.box[:3] + q.box[3:] / 2
        assert np.all(lo >= -1e-9) and np.all(hi <= 8 + 1e-9)
        assert 0 <= q.score <= 1


def test_clip_boxes_keeps_inside():
    out = clip_boxes([[0, 0, 0, 10, 10, 10]], (8, 8, 8))
    assert np.allclose(out, [[2.5, 2.5, 2.5, 5, 5, 5]])


def test_roi_features_examples():
    fmap = np.full((16, 4, 4, 4), 2.5)
    assert np.allclose(roi_features(fmap, np.array([8, 8, 8, 8, 8, 8.0])), 2.5)
    fmap = np.zeros((16, 4, 4, 4))
    fmap[:, 1, 1, 1] = np.arange(16)
    # box around the center of feature voxel (1,1,1): patch coords 6
    assert np.allclose(roi_features(fmap, np.array([6, 6, 6, 2, 2, 2.0])), np.arange(16))
    fmap[:, 1, 1, 1] = 1.0
    fmap[:, 1, 1, 2] = 3.0
    # spans feature voxels x=1 and x=2 (centers at 6 and 10)
    assert np.allclose(roi_features(fmap, np.array([6, 6, 8, 2, 2, 6.0])), 2.0)


def test_roi_head_examples():
    out = forward_roi(zero_params(), np.ones(16))
    assert out.probs[0] == 0.5 and np.all(out.offsets == 0)
    rng = np.random.default_rng(0)
    for _ in range(1000 // 50):
        p = DetectorParams(rng.normal(scale=3, size=init_params(0).size))
        probs = forward_roi(p, rng.normal(size=(50, 16))).probs
        assert np.all((probs >= 0) & (probs <= 1))


def test_params_manifest_invariants():
    p = init_params(0)
    assert p.size == sum(int(np.prod(s)) for _, s in MANIFEST)
    with pytest.raises(ValueError):
        DetectorParams(np.zeros(p.size + 1))
    with pytest.raises(ValueError):
        DetectorParams(np.full(p.size, np.nan))


def test_sgd_examples():
    p = DetectorParams(np.ones(init_params(0).size))
    g = np.full(p.size, 2.0)
    assert sgd_step(p, np.zeros(p.size), OptimState(p.size, 0.1, 0.9, 0.0)) == p
    one = sgd_step(p, g, OptimState(p.size, 0.1, 0.9, 0.0))
    assert np.allclose(one.flat, 1 - 0.1 * 2)
    opt = OptimState(p.size, 0.1, 0.9, 0.0)
    two = sgd_step(sgd_step(p, g, opt), g, opt)
    assert np.allclose(p.flat - two.flat, 0.1 * (2 + 0.9) * 2)


def test_sgd_mask_freezes_entries():
    p = init_params(0)
    mask = p.layer_mask(("conv1",))
    out = sgd_step(p, np.ones(p.size), OptimState(p.size), mask)
    assert np.array_equal(out.flat[~mask], p.flat[~mask])
    assert np.all(out.flat[mask] != p.flat[mask])


def test_checkpoint_roundtrip(tmp_path):
    p = random_params(np.random.default_rng(0))
    save_checkpoint(p, tmp_path / "a.ckpt", {"epoch": 3})
    q, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert q == p and meta == {"epoch": 3}
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw.startswith(b"SUPICI-CKPT-1")
    (tmp_path / "b.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_gradient_zero_at_stationary_point():
    # eta = 0, every WE probability in the dead zone: zero RoI head output -> p = 0.5
    p = init_params(0)
    flat = p.flat.copy()
    flat[p.slices["roi.w2"]] = 0
    flat[p.slices["roi.b2"]] = 0
    p = DetectorParams(flat)
    task = PatchTask(np.zeros((16, 16, 16), np.uint8), we_boxes=np.array([[8, 8, 8, 6, 6, 6.0]]))
    res = loss_gradient(p, [task], LossSpec("student", eta=0.0))
    assert np.linalg.norm(res.grad) <= 1e-9


def test_gradient_linear_in_eta():
    rng = np.random.default_rng(5)
    p = random_params(rng, 5)
    batch = random_batch(rng, "supervised")
    for t in batch:
        t.we_boxes = None
    g1 = loss_gradient(p, batch, LossSpec("student", eta=1.0)).grad
    g3 = loss_gradient(p, batch, LossSpec("student", eta=3.0)).grad
    assert np.allclose(g3, 3 * g1, rtol=1e-10, atol=1e-14)


def test_mean_normalisation_divides_by_counts():
    rng = np.random.default_rng(8)
    p = random_params(rng, 8)
    batch = random_batch(rng, "student", n_patches=1)
    t = batch[0]
    s = loss_gradient(p, batch, LossSpec("student")).patches[0].terms
    m = loss_gradient(p, batch, LossSpec("student", normalize=True)).patches[0].terms
    n_rpn = max(1, int(np.sum(t.rpn_labels >= 0)))
    n_roi = max(1, int(np.sum(t.roi_labels >= 0)))
    assert m["rpn_cls"] == pytest.approx(s["rpn_cls"] / n_rpn)
    assert m["roi_reg"] == pytest.approx(s["roi_reg"] / n_roi)
    assert m["we"] == pytest.approx(s["we"] / len(t.we_boxes))


def test_nonfinite_loss_names_term():
    p = init_params(0)
    flat = p.flat.copy()
    flat[p.slices["rpn.b"]] = -1e308
    task = PatchTask(np.zeros((16, 16, 16), np.uint8), rpn_labels=np.ones(192, int),
                     rpn_offsets=np.full((192, 6), 1e308))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteLossError) as exc:
            loss_gradient(DetectorParams(flat), [task], LossSpec("supervised"))
    assert exc.value.term == "rpn_reg"


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("bogus")
    with pytest.raises(ValueError):
        LossSpec("student", eta=-1)
    with pytest.raises(ValueError):
        LossSpec("contrastive", contrastive_features="post")


def test_full_detector_gradcheck():
    for r in check_detector(seed=11, coords_per_layer=20):
        assert r.passed, r
        assert r.instances >= 20 * len(MANIFEST) * 0.8


def _tiny_source():
    spec = SynthDomainSpec(name="s", side=32, radius_min=3, radius_max=5, seed=4)
    return [gen_synth_scan(spec, i) for i in range(6)]


def test_train_source_deterministic_and_errors():
    scans = _tiny_source()
    cfg = DetectorConfig(epochs=2, batch_size=4, patch_side=16)
    a, ha = train_source(scans, cfg, seed=3)
    b, hb = train_source(scans, cfg, seed=3)
    assert a == b and ha == hb
    with pytest.raises(ValueError):
        train_source([], cfg, seed=0)


def test_train_source_writes_checkpoints(tmp_path):
    cfg = DetectorConfig(epochs=2, batch_size=4, patch_side=16)
    train_source(_tiny_source(), cfg, seed=0, ckpt_dir=tmp_path)
    assert sorted(x.name for x in tmp_path.iterdir()) == ["source_epoch001.ckpt", "source_epoch002.ckpt"]


def test_train_source_loss_mostly_decreasing():
    cfg = DetectorConfig(epochs=10, batch_size=4, patch_side=16)
    _, hist = train_source(_tiny_source(), cfg, seed=0)
    pairs = list(zip(hist, hist[1:]))
    assert sum(b <= a for a, b in pairs) >= 0.8 * len(pairs)


def test_contrastive_pre_features_differ_from_relu():
    rng = np.random.default_rng(2)
    p = random_params(rng, 2)
    batch = random_batch(rng, "contrastive")
    a = loss_gradient(p, batch, LossSpec("contrastive"))
    b = loss_gradient(p, batch, LossSpec("contrastive", contrastive_features="pre"))
    assert np.isfinite(b.value)
    # RoI head never receives contrastive gradient
    roi = p.layer_mask(("roi",))
    assert not a.grad[roi].any() and not b.grad[roi].any()
