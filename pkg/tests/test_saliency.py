import numpy as np
import pytest

from softcam import autodiff as ad
from softcam import models as M
from softcam import saliency as S
from softcam.autodiff import Tape, Tensor
from softcam.saliency import MethodId

from conftest import small_model

X16 = np.random.default_rng(42).normal(size=(1, 16, 16)).astype(np.float32)


def _with_head(model, layers, kind=M.BlackBoxHead):
    return M.ModelBundle(model.config, model.backbone, kind(layers))


def _one_block(kernel, bias=None):
    """Single conv block (no pool) over a 1-channel 2x2 image, for hand-checked cases."""
    cfg = M.BackboneConfig(input_shape=(1, 2, 2), blocks=(M.BlockSpec(kernel.shape[0], kernel=1, padding=0, pool=False),))
    b = np.zeros(kernel.shape[0], np.float32) if bias is None else np.asarray(bias, np.float32)
    return cfg, [(kernel.astype(np.float32), b)]


# ---------------------------------------------------------------- CAM


def test_cam_zero_weights_and_arithmetic():
    model = small_model(1)
    zero = _with_head(model, [(np.zeros((2, 6), np.float32), np.zeros(2, np.float32))])
    assert not S.cam(zero, np.ones((1, 8, 8), np.float32), 0).values.any()
    cfg, bb = _one_block(np.ones((1, 1, 1, 1)))
    toy = M.ModelBundle(cfg, bb, M.BlackBoxHead([(np.array([[2.0], [0.0]], np.float32), np.zeros(2, np.float32))]))
    # relu(x) with x = [[1, -1], [1, -1]] then w=2 -> [[2, 0], [2, 0]]; negative A needs a signed feature:
    x = np.array([[[1.0, 0.0], [0.5, 0.0]]], np.float32)
    np.testing.assert_array_equal(S.cam(toy, x, 0).values, [[2.0, 0.0], [1.0, 0.0]])


def test_cam_signed_with_signed_features():
    model = small_model(0, channels=(1, 1))
    feats = np.array([[[1.0, -1.0]]], np.float32)
    w = np.array([[2.0], [0.0]], np.float32)
    s = np.tensordot(w[0], feats, axes=1)
    assert s.tolist() == [[2.0, -2.0]]
    toy = _with_head(model, [(w, np.zeros(2, np.float32))])
    assert S.cam(toy, np.ones((1, 8, 8), np.float32), 0).resolution == "feature"


def test_cam_rejects_multi_fc():
    with pytest.raises(S.NotApplicable, match="CAM requires single-FC head"):
        S.cam(small_model(0, preset="vgg"), np.zeros((1, 8, 8), np.float32), 0)
    with pytest.raises(S.NotApplicable):
        S.cam(small_model(0, head="softcam"), np.zeros((1, 8, 8), np.float32), 0)


@pytest.mark.parametrize("seed", range(50))
def test_cam_equals_softcam_evidence(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed, size=16, n_classes=int(rng.integers(2, 5)))
    (w, _), = model.head.layers
    model = _with_head(model, [(w, np.zeros(w.shape[0], np.float32))])
    sc = M.to_softcam(model)
    x = rng.normal(size=(1, 16, 16)).astype(np.float32)
    for c in range(model.n_classes):
        np.testing.assert_allclose(S.cam(model, x, c).values, S.softcam_evidence(sc, x, c).values, atol=1e-5)


# ------------------------------------------------------------- GradCAM


@pytest.mark.parametrize("seed", range(10))
def test_gradcam_on_single_fc_is_scaled_relu_cam(seed):
    # d logit / d A_k(i,j) = w_k / NM at every cell; the spatial mean of that is w_k / NM
    model = small_model(seed, size=16)
    x = np.random.default_rng(seed).normal(size=(1, 16, 16)).astype(np.float32)
    nm = 16
    for c in range(2):
        g = S.gradcam(model, x, c).values
        assert g.min() >= 0
        np.testing.assert_allclose(g * nm, np.maximum(S.cam(model, x, c).values, 0), atol=1e-5)


def test_gradcam_zero_image_zero_map():
    assert not S.gradcam(small_model(1, preset="vgg"), np.zeros((1, 8, 8), np.float32), 1).values.any()


# ------------------------------------------------------------- LayerCAM


def test_layercam_arithmetic():
    # D=1, gradient field [[1, -1]], A=[[3, 5]] -> [[3, 0]]
    A = np.array([[[3.0, 5.0]]])
    grad = np.array([[[1.0, -1.0]]])
    assert (np.maximum(grad, 0) * A).sum(axis=0).tolist() == [[3.0, 0.0]]


@pytest.mark.parametrize("seed", range(5))
def test_layercam_linear_head_reduction(seed):
    model = small_model(seed, size=16)
    x = np.random.default_rng(seed).normal(size=(1, 16, 16)).astype(np.float32)
    feats = M.forward_features(model, x).data
    (w, _), = model.head.layers
    nm = feats.shape[1] * feats.shape[2]
    for c in range(2):
        ref = np.tensordot(np.maximum(w[c] / nm, 0), feats, axes=1)
        np.testing.assert_allclose(S.layercam(model, x, c).values, ref, atol=1e-6)


def test_layercam_negative_gradients_zero_map():
    model = small_model(2)
    (w, b), = model.head.layers
    neg = _with_head(model, [(-np.abs(w), b)])
    assert not S.layercam(neg, np.random.default_rng(0).normal(size=(1, 8, 8)).astype(np.float32), 0).values.any()


# ------------------------------------------------------------- ScoreCAM


def _scorecam_oracle(model, x, c):
    feats = M.forward_features(model, x).data.astype(np.float64)
    scores = []
    for k in range(feats.shape[0]):
        up = ad.upsample_array(feats[k].astype(np.float32), x.shape[-2:]).astype(np.float64)
        lo, hi = up.min(), up.max()
        mask = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
        scores.append(float(M.logits(model, (x * mask.astype(np.float32))).data[c]))
    e = np.exp(np.array(scores) - max(scores))
    wts = e / e.sum()
    return np.maximum(sum(wk * fk for wk, fk in zip(wts, feats)), 0)


def test_scorecam_brute_force_toy():
    cfg = M.BackboneConfig(input_shape=(1, 2, 2), blocks=(M.BlockSpec(2, kernel=1, padding=0, pool=False),))
    model = M.ModelBundle(cfg, [(np.array([[[[1.0]]], [[[-0.5]]]], np.float32), np.array([0.1, 0.3], np.float32))],
                          M.BlackBoxHead([(np.array([[1.0, -2.0], [0.5, 1.0]], np.float32), np.zeros(2, np.float32))]))
    x = np.array([[[0.2, -1.0], [1.5, 0.7]]], np.float32)
    for c in range(2):
        np.testing.assert_allclose(S.scorecam(model, x, c).values, _scorecam_oracle(model, x, c), atol=1e-6)


def test_scorecam_matches_oracle_on_small_model():
    model = small_model(5, size=16)
    np.testing.assert_allclose(S.scorecam(model, X16, 1).values, _scorecam_oracle(model, X16, 1), atol=1e-5)


def test_scorecam_single_channel_weight_one():
    cfg, bb = _one_block(np.ones((1, 1, 1, 1)))
    model = M.ModelBundle(cfg, bb, M.BlackBoxHead([(np.array([[1.0], [-1.0]], np.float32), np.zeros(2, np.float32))]))
    x = np.array([[[1.0, 2.0], [0.0, 3.0]]], np.float32)
    np.testing.assert_allclose(S.scorecam(model, x, 0).values, np.maximum(x[0], 0))


def test_scorecam_identical_channels_uniform_weights():
    cfg, bb = _one_block(np.ones((3, 1, 1, 1)))
    model = M.ModelBundle(cfg, bb, M.BlackBoxHead([(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], np.float32),
                                                    np.zeros(2, np.float32))]))
    x = np.array([[[1.0, 2.0], [0.0, 3.0]]], np.float32)
    # equal masks give equal scores, so softmax weights are 1/3 each and the map is the mean channel
    np.testing.assert_allclose(S.scorecam(model, x, 0).values, x[0], atol=1e-6)


def test_scorecam_channel_selection_by_energy():
    feats = np.stack([np.full((2, 2), v, np.float32) for v in (0.5, 3.0, -2.0, 1.0)])
    assert S.scorecam_channels(feats, 2).tolist() == [1, 2]
    assert S.scorecam_channels(feats, None).tolist() == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        S.scorecam_channels(feats, 5)
    masks = S.scorecam_masks(feats, np.array([0]), (4, 4))
    assert not masks.any()


# ------------------------------------------------------------ Guided BP


def test_guided_bp_equals_plain_gradient_without_relu():
    # a 1x1 linear block whose outputs are positive everywhere makes relu the identity
    cfg, bb = _one_block(np.array([[[[2.0]]]]), bias=[10.0])
    model = M.ModelBundle(cfg, bb, M.BlackBoxHead([(np.array([[1.5], [-1.0]], np.float32), np.zeros(2, np.float32))]))
    x = np.array([[[0.1, -0.2], [0.3, 0.4]]], np.float32)
    plain = S.input_gradient(model, x, 0).sum(axis=0)
    np.testing.assert_allclose(S.guided_backprop(model, x, 0).values, plain)
    np.testing.assert_allclose(plain, np.full((2, 2), 2.0 * 1.5 / 4))


def test_guided_bp_closed_gate():
    model = small_model(3)
    k, b = model.backbone[0]
    closed = M.ModelBundle(model.config, [(np.zeros_like(k), np.full_like(b, -1.0))] + model.backbone[1:], model.head)
    assert not S.guided_backprop(closed, X16[:, :8, :8], 0).values.any()


def test_guided_bp_two_layer_chain_oracle():
    # x -> relu(a * x) -> mean -> w ; hand chain rule with guided gating
    cfg = M.BackboneConfig(input_shape=(1, 2, 2), blocks=(M.BlockSpec(2, kernel=1, padding=0, pool=False),))
    a = np.array([1.0, -1.0], np.float32)
    w = np.array([[1.0, -2.0], [0.0, 0.0]], np.float32)
    model = M.ModelBundle(cfg, [(a.reshape(2, 1, 1, 1), np.zeros(2, np.float32))],
                          M.BlackBoxHead([(w, np.zeros(2, np.float32))]))
    x = np.array([[[0.5, -0.5], [2.0, -1.0]]], np.float32)
    upstream = w[0] / 4  # d logit / d feature, per channel and cell
    ref = np.zeros((2, 2))
    for k in range(2):
        pre = a[k] * x[0]
        gate = (pre > 0) & (upstream[k] > 0)
        ref += np.where(gate, upstream[k], 0.0) * a[k]
    np.testing.assert_allclose(S.guided_backprop(model, x, 0).values, ref)
    standard = sum(np.where(a[k] * x[0] > 0, upstream[k], 0.0) * a[k] for k in range(2))
    np.testing.assert_allclose(S.input_gradient(model, x, 0)[0], standard)


# ---------------------------------------------------------- Integrated gradients


def test_ig_zero_at_baseline():
    model = small_model(1, size=16)
    assert not S.integrated_gradients(model, np.zeros((1, 16, 16), np.float32), 0).values.any()


def test_ig_linear_model_exact():
    cfg, bb = _one_block(np.array([[[[2.0]]]]), bias=[10.0])
    model = M.ModelBundle(cfg, bb, M.BlackBoxHead([(np.array([[1.5], [-1.0]], np.float32), np.zeros(2, np.float32))]))
    x = np.array([[[0.1, -0.2], [0.3, 0.4]]], np.float32)
    grad = S.input_gradient(model, x, 0)
    for m in (1, 3, 32):
        np.testing.assert_allclose(S.integrated_gradients_raw(model, x, 0, steps=m), x * grad, rtol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_ig_completeness(seed):
    model = small_model(seed, size=16)
    x = np.random.default_rng(seed).normal(size=(1, 16, 16)).astype(np.float32)
    c = seed % 2
    gap = float(M.logits(model, x).data[c] - M.logits(model, np.zeros_like(x)).data[c])
    total = float(S.integrated_gradients_raw(model, x, c, steps=128).sum())
    assert abs(total - gap) <= 0.01 * abs(gap)


def test_ig_error_shrinks_with_steps():
    model = small_model(3, size=16)
    x = np.random.default_rng(7).normal(size=(1, 16, 16)).astype(np.float32)
    gap = float(M.logits(model, x).data[1] - M.logits(model, np.zeros_like(x)).data[1])
    errs = [abs(float(S.integrated_gradients_raw(model, x, 1, steps=m).sum()) - gap) for m in (8, 32, 128)]
    assert errs[0] >= errs[1] >= errs[2]


# ------------------------------------------------------------ SoftCAM


def test_softcam_evidence_mean_is_logit():
    model = small_model(4, head="softcam", size=16)
    ev, logits, _ = M.softcam_forward(model, X16)
    for c in range(2):
        smap = S.softcam_evidence(model, X16, c)
        assert smap.values.mean() == pytest.approx(float(logits.data[c]), abs=1e-6)
        assert np.array_equal(smap.values, ev.data[c])


def test_softcam_negated_weights_negate_maps():
    model = small_model(4, head="softcam", size=16)
    (w, _), = model.head.layers
    sym = _with_head(model, [(np.concatenate([w[:1], -w[:1]]), np.zeros(2, np.float32))], M.SoftCamHead)
    np.testing.assert_array_equal(S.softcam_evidence(sym, X16, 0).values, -S.softcam_evidence(sym, X16, 1).values)


def test_softcam_needs_no_extra_passes():
    model = small_model(4, head="softcam", size=16)
    forward = M.softcam_forward(model, X16)
    before = M.passes.snapshot()
    S.softcam_evidence(model, X16, 1, forward=forward)
    assert M.passes.snapshot() == before
    S.gradcam(model, X16, 1)
    f, b = M.passes.snapshot()
    assert (f - before[0], b - before[1]) == (1, 1)


def test_softcam_rejects_blackbox():
    with pytest.raises(S.NotApplicable):
        S.softcam_evidence(small_model(0), np.zeros((1, 8, 8), np.float32), 0)


# ---------------------------------------------------------- shared contracts


ALL = list(MethodId)


@pytest.mark.parametrize("method", ALL)
def test_resolution_sign_and_determinism(method):
    model = small_model(6, head="softcam" if method is MethodId.SOFTCAM else "blackbox", size=16)
    a = S.explain(model, X16, method, 1)
    b = S.explain(model, X16, method, 1)
    assert np.array_equal(a.values, b.values)
    expected = (16, 16) if method in (MethodId.GUIDED_BP, MethodId.INTEGRATED_GRADIENTS) else (4, 4)
    assert a.shape == expected
    assert a.resolution == ("input" if expected == (16, 16) else "feature")
    if method in S.NON_NEGATIVE:
        assert a.values.min() >= 0


def test_signed_methods_can_go_negative():
    model = small_model(6, size=16)
    for method in (MethodId.CAM, MethodId.GUIDED_BP, MethodId.INTEGRATED_GRADIENTS):
        assert any(S.explain(model, X16, method, c).values.min() < 0 for c in range(2)), method
    sc = M.to_softcam(model)
    assert any(S.explain(sc, X16, MethodId.SOFTCAM, c).values.min() < 0 for c in range(2))


def test_applicability():
    bb, sc, vgg = small_model(0), small_model(0, head="softcam"), small_model(0, preset="vgg")
    assert S.applicable("CAM", bb) and not S.applicable("CAM", vgg) and not S.applicable("CAM", sc)
    assert S.applicable("SoftCAM-evidence", sc) and not S.applicable("SoftCAM-evidence", bb)
    assert all(S.applicable(m, vgg) for m in ALL if m not in (MethodId.CAM, MethodId.SOFTCAM))


def test_saliency_map_validation():
    with pytest.raises(ValueError):
        S.SaliencyMap(0, np.array([[np.nan]]), "feature", "CAM")
    with pytest.raises(ValueError):
        S.SaliencyMap(0, np.zeros(3), "feature", "CAM")
    with pytest.raises(ValueError):
        S.SaliencyMap(0, np.zeros((2, 2)), "pixel", "CAM")


def test_class_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        S.gradcam(small_model(0), np.zeros((1, 8, 8), np.float32), 2)
