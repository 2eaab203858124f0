import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedad.attention import (
    GradCAM,
    SoftMaskParams,
    attention_bounds,
    gradcam,
    lower_bound_loss,
    nonlocal_attention,
    nonlocal_enhance,
    normalize_attention,
    segmentation_attention,
    soft_mask,
    upper_bound_loss,
)

unit_maps = arrays(np.float64, (3, 4), elements=st.floats(0.0, 1.0, width=32))


# -- normalization -----------------------------------------------------------


def test_normalize_divides_by_max():
    out = normalize_attention([[0.0, 2.0], [4.0, 1.0]])
    assert np.allclose(out.values, [[0.0, 0.5], [1.0, 0.25]])
    assert out.normalized and not out.zero_map


def test_normalize_zero_map_flagged():
    out = normalize_attention(np.zeros((2, 2)))
    assert np.array_equal(out.values, np.zeros((2, 2)))
    assert out.zero_map


def test_normalize_idempotent():
    once = normalize_attention([[0.1, 0.9], [0.5, 1.0]])
    twice = normalize_attention(once)
    assert np.array_equal(once.values, twice.values)


def test_normalize_rejects_bad_values():
    with pytest.raises(ValueError):
        normalize_attention([[np.nan, 0.0]])
    with pytest.raises(ValueError):
        normalize_attention([[-0.5, 1.0]])


# -- soft mask ---------------------------------------------------------------


def test_soft_mask_midpoint():
    params = SoftMaskParams(rho=8.0, b=0.5)
    assert torch.allclose(soft_mask(torch.full((2, 2), 0.5), params), torch.full((2, 2), 0.5))


def test_soft_mask_sharp_limit():
    params = SoftMaskParams(rho=1e4, b=0.5)
    hi = soft_mask(torch.tensor([[0.6]]), params)
    lo = soft_mask(torch.tensor([[0.4]]), params)
    assert abs(float(hi) - 1.0) < 1e-4 and abs(float(lo)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(a=unit_maps, b=unit_maps)
def test_soft_mask_monotone(a, b):
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert (soft_mask(lo).numpy() <= soft_mask(hi).numpy() + 1e-7).all()


def test_soft_mask_params_validated():
    with pytest.raises(ValueError):
        SoftMaskParams(rho=0.0)
    with pytest.raises(ValueError):
        SoftMaskParams(b=1.5)


# -- segmentation attention ---------------------------------------------------


def test_segmentation_attention_symmetry():
    logits = torch.zeros(2, 3, 3)
    out = segmentation_attention(logits, tau=1.0)
    assert torch.allclose(out, torch.full((2, 3, 3), 0.5))


def test_segmentation_attention_argmax_limit():
    logits = torch.as_tensor(np.random.default_rng(0).normal(size=(3, 4, 4))).float()
    # enforce a clear per-pixel winner so the limit is sharp
    winners = logits.argmax(dim=0)
    for c in range(3):
        logits[c][winners == c] += 0.5
    out = segmentation_attention(logits, tau=1e-3)
    indicator = torch.nn.functional.one_hot(winners, 3).permute(2, 0, 1).float()
    assert torch.allclose(out, indicator, atol=1e-6)


def test_segmentation_attention_uniform_limit():
    logits = torch.as_tensor(np.random.default_rng(1).normal(size=(5, 2, 2))).float()
    out = segmentation_attention(logits, tau=1e3)
    assert torch.allclose(out, torch.full_like(out, 0.2), atol=1e-3)


def test_segmentation_attention_rejects_bad_tau():
    with pytest.raises(ValueError):
        segmentation_attention(torch.zeros(2, 2, 2), tau=0.0)


# -- non-local attention -------------------------------------------------------


def test_nonlocal_uniform_similarity():
    feats = torch.ones(3, 2, 2)
    att = nonlocal_attention(feats)
    assert torch.allclose(att, torch.full((4, 4), 0.25))


def test_nonlocal_columns_sum_to_one():
    feats = torch.as_tensor(np.random.default_rng(0).normal(size=(5, 3, 4))).float()
    att = nonlocal_attention(feats)
    assert att.shape == (12, 12)
    assert torch.allclose(att.sum(dim=0), torch.ones(12), atol=1e-5)


def test_nonlocal_dominant_column():
    # orthogonal feature columns, one much larger: 2 channels, 1x2 spatial
    feats = torch.tensor([[[3.0, 0.0]], [[0.0, 1.0]]])  # (J=2, H=1, W=2)
    att = nonlocal_attention(feats)
    # first column: similarities (9, 0) -> softmax e^9/(e^9+1)
    expected = math.exp(9) / (math.exp(9) + 1)
    assert abs(float(att[0, 0]) - expected) < 1e-6
    assert float(att[0, 0]) > 0.99


def test_nonlocal_oracle_small():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(2, 2, 2))
    att = nonlocal_attention(torch.as_tensor(f).float()).numpy()
    flat = f.reshape(2, 4)
    sim = flat.T @ flat
    expected = np.exp(sim) / np.exp(sim).sum(axis=0, keepdims=True)
    assert np.allclose(att, expected, rtol=1e-5, atol=1e-6)


def test_nonlocal_rejects_nonfinite():
    with pytest.raises(ValueError):
        nonlocal_attention(torch.tensor([[[np.inf]]]))


def test_enhance_zero_fixed_point():
    feats = torch.zeros(2, 3, 3)
    assert torch.allclose(nonlocal_enhance(feats), feats)


def test_enhance_preserves_shape():
    feats = torch.as_tensor(np.random.default_rng(0).normal(size=(4, 3, 5))).float()
    assert nonlocal_enhance(feats).shape == feats.shape


def test_enhance_uniform_doubles():
    feats = torch.full((3, 2, 2), 1.3)
    assert torch.allclose(nonlocal_enhance(feats), 2 * feats, atol=1e-6)


def test_enhance_oracle_small():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(2, 2, 2))
    out = nonlocal_enhance(torch.as_tensor(f).float()).numpy()
    flat = f.reshape(2, 4)
    sim = flat.T @ flat
    att = np.exp(sim) / np.exp(sim).sum(axis=0, keepdims=True)
    expected = f + (att @ flat.T).T.reshape(2, 2, 2)
    assert np.allclose(out, expected, rtol=1e-5, atol=1e-6)


# -- bounds --------------------------------------------------------------------


def test_bounds_hand_case():
    pair = attention_bounds([np.array([[0.2, 0.8]]), np.array([[0.5, 0.3]])])
    assert np.allclose(pair.lower, [[0.2, 0.3]])
    assert np.allclose(pair.upper, [[0.5, 0.8]])


def test_bounds_single_map_collapse():
    m = np.array([[0.1, 0.9]], dtype=np.float32)
    pair = attention_bounds([m])
    assert np.array_equal(pair.lower, m) and np.array_equal(pair.upper, m)


@settings(max_examples=25, deadline=None)
@given(maps=st.lists(unit_maps, min_size=1, max_size=5))
def test_bounds_order_statistics(maps):
    pair = attention_bounds(maps)
    for m in maps:
        assert (pair.lower <= np.asarray(m, dtype=np.float32) + 1e-7).all()
        assert (np.asarray(m, dtype=np.float32) <= pair.upper + 1e-7).all()
    # idempotent: bounds of {lower, upper} return the same pair
    again = attention_bounds([pair.lower, pair.upper])
    assert np.array_equal(again.lower, pair.lower)
    assert np.array_equal(again.upper, pair.upper)


def test_bounds_reject_bad_input():
    with pytest.raises(ValueError):
        attention_bounds([])
    with pytest.raises(ValueError):
        attention_bounds([np.zeros((2, 2)), np.zeros((3, 2))])
    with pytest.raises(ValueError):
        attention_bounds([np.full((2, 2), 2.0)])  # not normalized


# -- bound losses ---------------------------------------------------------------


def test_lower_bound_loss_hand_value():
    # single-cell map, consensus 1, student attention saturating the mask -> -1
    params = SoftMaskParams(rho=1e4, b=0.5)
    res = lower_bound_loss(torch.ones(1, 1), torch.ones(1, 1), params)
    assert abs(float(res.value) + 1.0) < 1e-6
    assert not res.degenerate


def test_lower_bound_degenerate_consensus():
    res = lower_bound_loss(torch.rand(3, 3), torch.zeros(3, 3))
    assert float(res.value) == 0.0
    assert res.degenerate


def test_upper_bound_loss_hand_value():
    params = SoftMaskParams(rho=1e4, b=0.5)
    res = upper_bound_loss(torch.ones(1, 1), torch.ones(1, 1), params)
    assert abs(float(res.value) + 1.0) < 1e-6


def test_upper_bound_zero_student_flagged():
    res = upper_bound_loss(torch.zeros(2, 2), torch.rand(2, 2))
    assert float(res.value) == 0.0
    assert res.degenerate


def _oracle_lower(student, consensus, rho, b):
    h, w = consensus.shape
    num = den = 0.0
    for i in range(h):
        for j in range(w):
            t = 1.0 / (1.0 + math.exp(-rho * (student[i][j] - b)))
            num += consensus[i][j] * t
            den += consensus[i][j]
    return -(num / den) / (h * w)


def _oracle_upper(student, diversity, rho, b):
    h, w = diversity.shape
    num = den = 0.0
    for i in range(h):
        for j in range(w):
            t = 1.0 / (1.0 + math.exp(-rho * (diversity[i][j] - b)))
            num += student[i][j] * t
            den += student[i][j]
    return -(num / den) / (h * w)


def test_bound_losses_match_bruteforce_oracle():
    rng = np.random.default_rng(5)
    student = rng.random((5, 4))
    other = rng.random((5, 4))
    params = SoftMaskParams(rho=8.0, b=0.5)
    got_low = float(lower_bound_loss(torch.as_tensor(student), torch.as_tensor(other), params).value)
    got_up = float(upper_bound_loss(torch.as_tensor(student), torch.as_tensor(other), params).value)
    assert got_low == pytest.approx(_oracle_lower(student, other, 8.0, 0.5), rel=1e-6)
    assert got_up == pytest.approx(_oracle_upper(student, other, 8.0, 0.5), rel=1e-6)


def test_lower_loss_decreases_when_student_activates_consensus():
    rng = np.random.default_rng(6)
    consensus = rng.random((4, 4))
    student = rng.random((4, 4)) * 0.5
    base = float(lower_bound_loss(torch.as_tensor(student), torch.as_tensor(consensus)).value)
    bumped = student.copy()
    bumped[consensus > 0.5] += 0.2
    after = float(lower_bound_loss(torch.as_tensor(bumped), torch.as_tensor(consensus)).value)
    assert after < base


def test_upper_loss_increases_when_mass_leaves_supported_cells():
    diversity = np.array([[0.9, 0.1], [0.9, 0.1]])
    concentrated = np.array([[1.0, 0.0], [1.0, 0.0]])  # mass where T(U) is high
    spread = np.array([[0.0, 1.0], [0.0, 1.0]])  # mass where T(U) is low
    lo = float(upper_bound_loss(torch.as_tensor(concentrated), torch.as_tensor(diversity)).value)
    hi = float(upper_bound_loss(torch.as_tensor(spread), torch.as_tensor(diversity)).value)
    assert hi > lo


@settings(max_examples=30, deadline=None)
@given(student=unit_maps, other=unit_maps)
def test_bound_losses_in_unit_interval(student, other):
    low = lower_bound_loss(torch.as_tensor(student), torch.as_tensor(other))
    up = upper_bound_loss(torch.as_tensor(student), torch.as_tensor(other))
    assert -1.0 <= float(low.value) <= 0.0
    assert -1.0 <= float(up.value) <= 0.0


def test_bound_losses_invariant_to_teacher_permutation():
    rng = np.random.default_rng(7)
    maps = [rng.random((3, 3)) for _ in range(4)]
    student = torch.as_tensor(rng.random((3, 3)))
    a = attention_bounds(maps)
    b = attention_bounds(maps[::-1])
    for pair in (a, b):
        pass
    assert float(lower_bound_loss(student, torch.as_tensor(a.lower)).value) == float(
        lower_bound_loss(student, torch.as_tensor(b.lower)).value
    )
    assert float(upper_bound_loss(student, torch.as_tensor(a.upper)).value) == float(
        upper_bound_loss(student, torch.as_tensor(b.upper)).value
    )


def test_bound_loss_gradients_flow():
    student = torch.rand(4, 4, requires_grad=True)
    res = lower_bound_loss(student, torch.rand(4, 4))
    res.value.backward()
    assert student.grad is not None and torch.isfinite(student.grad).all()


def test_normalized_variant_scales_out_map_size():
    rng = np.random.default_rng(8)
    student = torch.as_tensor(rng.random((6, 6)))
    other = torch.as_tensor(rng.random((6, 6)))
    verbatim = lower_bound_loss(student, other)
    scaled = lower_bound_loss(student, other, normalized=True)
    assert float(scaled.value) == pytest.approx(36 * float(verbatim.value), rel=1e-6)


def test_attention_map_sidecar_roundtrip(tmp_path):
    import json

    from fedad.attention import AttentionMap

    amap = AttentionMap(np.random.default_rng(0).random((4, 4)).astype(np.float32),
                        kind="gradcam", class_id=2, normalized=True)
    amap.save(tmp_path / "map")
    values = np.load(tmp_path / "map.npy")
    sidecar = json.loads((tmp_path / "map.json").read_text())
    assert np.array_equal(values, amap.values)
    assert sidecar == {"kind": "gradcam", "class_id": 2, "shape": [4, 4],
                       "normalized": True, "flags": {"zero_map": False}}


# -- gradient-based maps ---------------------------------------------------------


class GapLogit(torch.nn.Module):
    """Global-average-pool, identity logit over one feature channel."""

    gradcam_layer = "feat"

    def __init__(self):
        super().__init__()
        self.feat = torch.nn.Identity()

    def forward(self, x):
        return self.feat(x).mean(dim=(2, 3))


def test_gradcam_symbolic_gap_model():
    x = torch.rand(1, 1, 4, 4)
    out = gradcam(GapLogit(), x, class_id=0)
    expected = np.maximum(x[0, 0].numpy() / 16.0, 0.0)
    assert np.allclose(out.values, expected, rtol=1e-6, atol=1e-8)


def test_gradcam_zero_features_zero_map():
    out = gradcam(GapLogit(), torch.zeros(1, 1, 4, 4), class_id=0)
    assert np.array_equal(out.values, np.zeros((4, 4)))


def test_gradcam_weights_match_finite_differences(two_conv_net):
    # float64 throughout and features shifted away from the ReLU kink, so
    # central differences are an accurate independent oracle
    model = two_conv_net.double()
    with torch.no_grad():
        model.conv2.bias += 1.0
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    cam = GradCAM(model)
    with torch.enable_grad():
        logits = cam._forward(x)
        feats = cam._features
        grads = torch.autograd.grad(logits[0, 1], feats, retain_graph=True)[0]
    beta = grads.mean(dim=(2, 3))[0]
    cam.close()
    assert float(feats.detach().min()) > 0.05  # no kink inside the FD stencil

    feats_fd = feats.detach().clone()
    eps = 1e-5

    def score(feature_tensor):
        with torch.no_grad():
            return float(model.head(torch.relu(feature_tensor).flatten(1))[0, 1])

    fd_beta = []
    for j in range(feats_fd.shape[1]):
        acc = 0.0
        for r in range(feats_fd.shape[2]):
            for c in range(feats_fd.shape[3]):
                plus = feats_fd.clone()
                plus[0, j, r, c] += eps
                minus = feats_fd.clone()
                minus[0, j, r, c] -= eps
                acc += (score(plus) - score(minus)) / (2 * eps)
        fd_beta.append(acc / (feats_fd.shape[2] * feats_fd.shape[3]))
    assert np.allclose(beta.numpy(), fd_beta, rtol=1e-3, atol=1e-8)


def test_gradcam_linearity_in_features():
    torch.manual_seed(0)
    conv = torch.nn.Conv2d(1, 2, 3, padding=1, bias=False)

    class LinearHead(torch.nn.Module):
        gradcam_layer = "feat"

        def __init__(self):
            super().__init__()
            self.feat = conv
            self.w = torch.nn.Parameter(torch.randn(2))

        def forward(self, x):
            pooled = self.feat(x).mean(dim=(2, 3))
            return (pooled * self.w).sum(dim=1, keepdim=True)

    model = LinearHead()
    x = torch.rand(1, 1, 6, 6)
    single = gradcam(model, x, 0, normalize=False).values
    double = gradcam(model, 2 * x, 0, normalize=False).values
    assert np.allclose(double, 2 * single, rtol=1e-5, atol=1e-7)


def test_gradcam_rejects_non_spatial_layer(two_conv_net):
    with pytest.raises(ValueError, match="spatial"):
        gradcam(two_conv_net, torch.rand(1, 1, 8, 8), 0, layer="head")


def test_gradcam_rejects_inference_only_model():
    class NoGrad(torch.nn.Module):
        gradcam_layer = "feat"

        def __init__(self):
            super().__init__()
            self.feat = torch.nn.Conv2d(1, 2, 3, padding=1)

        def forward(self, x):
            with torch.no_grad():
                return self.feat(x).mean(dim=(2, 3))

    with pytest.raises(ValueError, match="gradient"):
        gradcam(NoGrad(), torch.rand(1, 1, 4, 4), 0)


def test_gradcam_unknown_layer_and_class(two_conv_net):
    with pytest.raises(ValueError, match="not found"):
        GradCAM(two_conv_net, "block99")
    with pytest.raises(ValueError, match="class_id"):
        gradcam(two_conv_net, torch.rand(1, 1, 8, 8), 17)


def test_all_class_maps_batched(two_conv_net):
    cam = GradCAM(two_conv_net)
    logits, maps = cam.all_class_maps(torch.rand(5, 1, 8, 8))
    cam.close()
    assert logits.shape == (5, 3)
    assert maps.shape == (5, 3, 8, 8)
    peak = maps.amax(dim=(-2, -1))
    assert ((peak - 1.0).abs() < 1e-6).logical_or(peak == 0).all()
