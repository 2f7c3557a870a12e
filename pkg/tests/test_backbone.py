import math

import numpy as np
import pytest

from wiredet import autodiff as ad
from wiredet.backbone import (
    Backbone,
    BackboneConfig,
    attention_gate,
    dog_half_width,
    dog_kernel,
    make_dog_bank,
    scale_for_size,
)

BANK_SIZES = (2.0, 4.0, 6.0, 8.0, 10.0)


# ---------------------------------------------------------------------------
# scales
# ---------------------------------------------------------------------------

def test_scale_rule_endpoints():
    assert scale_for_size(2) == pytest.approx(1.0 / 9.0, abs=1e-9)
    assert scale_for_size(4) == pytest.approx(1.0)
    assert scale_for_size(10) == pytest.approx(9.0)


def test_scale_rejects_degenerate():
    with pytest.raises(ValueError):
        scale_for_size(1.0)
    with pytest.raises(ValueError):
        scale_for_size(0.5)


def test_bank_scales():
    bank = make_dog_bank(BANK_SIZES)
    np.testing.assert_allclose(
        bank.scales, [1 / 9, 1.0, 25 / 9, 49 / 9, 9.0], rtol=1e-12
    )
    assert len(bank.dog_kernels) == 15


def test_bank_rejects_wrong_count():
    with pytest.raises(ValueError):
        make_dog_bank([2, 4, 6, 8])
    with pytest.raises(ValueError):
        make_dog_bank([2, 4, 6, 8, 12])  # scale beyond 9.0


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def test_dog_kernel_zero_mean():
    for s in (1 / 9, 1.0, 9.0):
        for kind in ("Gxx", "Gyy", "Gxy"):
            k = dog_kernel(kind, s, dog_half_width(s))
            assert abs(k.weights.data.sum()) < 1e-6


def test_dog_kernel_symmetries():
    for s in (1.0, 9.0):
        gxx = dog_kernel("Gxx", s, dog_half_width(s)).weights.data
        gyy = dog_kernel("Gyy", s, dog_half_width(s)).weights.data
        gxy = dog_kernel("Gxy", s, dog_half_width(s)).weights.data
        np.testing.assert_allclose(gxx, gxx[:, ::-1], atol=1e-12)
        np.testing.assert_allclose(gxx, gxx[::-1, :], atol=1e-12)
        np.testing.assert_allclose(gyy, gxx.T, atol=1e-12)
        np.testing.assert_allclose(gxy, -gxy[:, ::-1], atol=1e-12)
        np.testing.assert_allclose(gxy, -gxy[::-1, :], atol=1e-12)


def test_gxy_pointwise_antisymmetry():
    k = dog_kernel("Gxy", 1.0, 3).weights.data
    c = 3
    assert k[c + 1, c + 1] == pytest.approx(-k[c + 1, c - 1], abs=1e-12)


def test_dog_kernel_rejects_bad_scale():
    with pytest.raises(ValueError):
        dog_kernel("Gxx", -1.0, 3)
    with pytest.raises(ValueError):
        dog_kernel("Gzz", 1.0, 3)


def _gaussian_ridge(n, r0, depth=0.5):
    """Vertical dark ridge whose profile matches an object of size r0."""
    x = np.arange(n) - n // 2
    sigma = (r0 - 1.0) / (3.0 * math.sqrt(2.0))
    profile = 1.0 - depth * np.exp(-(x**2) / (2.0 * sigma**2))
    return np.tile(profile, (n, 1))


def _center_response(kernel, image):
    hw = kernel.half_width
    c = image.shape[0] // 2
    patch = image[c - hw : c + hw + 1, c - hw : c + hw + 1]
    return abs(float((kernel.weights.data * patch).sum()))


def test_gxx_scale_selectivity_across_bank():
    # direct-convolution oracle: the matched bank scale responds strongest
    bank = make_dog_bank(BANK_SIZES)
    gxx = [k for k in bank.dog_kernels if k.kind == "Gxx"]
    for i, r0 in enumerate(BANK_SIZES):
        img = _gaussian_ridge(121, r0)
        responses = [_center_response(k, img) for k in gxx]
        assert int(np.argmax(responses)) == i, (r0, responses)


def test_gxx_s1_beats_s9_on_narrow_ridge():
    bank = make_dog_bank(BANK_SIZES)
    gxx = {k.scale_s: k for k in bank.dog_kernels if k.kind == "Gxx"}
    img = _gaussian_ridge(121, 4.0)
    assert _center_response(gxx[1.0], img) > _center_response(gxx[9.0], img)


def test_bank_kernels_train():
    bank = make_dog_bank(BANK_SIZES)
    k = bank.dog_kernels[0]
    before = k.weights.data.copy()
    st = ad.AdamState.for_params([k.weights])
    ad.adam_step([k.weights], [np.ones_like(before)], st)
    assert not np.array_equal(before, k.weights.data)


# ---------------------------------------------------------------------------
# attention gate
# ---------------------------------------------------------------------------

def test_gate_zero_keys_halve_queries():
    rng = np.random.default_rng(0)
    q = ad.Tensor(rng.standard_normal((4, 5, 5)).astype(np.float32))
    k = ad.Tensor(np.zeros((4, 5, 5), dtype=np.float32))
    out = attention_gate(q, k)
    np.testing.assert_allclose(out.data, q.data / 2.0, rtol=1e-6)


def test_gate_saturates_on_self_similarity():
    q = ad.Tensor(np.full((4, 3, 3), 10.0, dtype=np.float32))
    out = attention_gate(q, q)
    np.testing.assert_allclose(out.data, q.data, rtol=1e-4)


def test_gate_output_bounded_by_query():
    rng = np.random.default_rng(1)
    q = ad.Tensor(rng.standard_normal((6, 8, 8)).astype(np.float32))
    k = ad.Tensor(rng.standard_normal((6, 8, 8)).astype(np.float32))
    out = attention_gate(q, k)
    assert np.all(np.abs(out.data) <= np.abs(q.data) + 1e-7)


def test_gate_rejects_mismatch():
    with pytest.raises(ValueError):
        attention_gate(ad.Tensor(np.zeros((2, 4, 4))), ad.Tensor(np.zeros((3, 4, 4))))


def test_gate_gradient():
    rng = np.random.default_rng(2)
    q = ad.Tensor(rng.standard_normal((3, 4, 4)).astype(np.float64), requires_grad=True)
    k = ad.Tensor(rng.standard_normal((3, 4, 4)).astype(np.float64), requires_grad=True)
    err = ad.finite_diff_check(lambda ts: attention_gate(ts[0], ts[1]), [q, k])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# backbone forward
# ---------------------------------------------------------------------------

def small_config(**kw):
    base = dict(
        random_channels=4,
        stage_widths=(6, 8),
        input_resolution=(60, 60),
        max_half_width=4,
    )
    base.update(kw)
    return BackboneConfig(**base)


def test_backbone_output_resolution():
    model = Backbone(small_config(), seed=0)
    img = ad.Tensor(np.random.default_rng(3).random((1, 60, 60), dtype=np.float32))
    out = model.forward(img)
    assert out.shape == (8, 30, 30)


def test_backbone_full_resolution_contract():
    model = Backbone(BackboneConfig(random_channels=4, stage_widths=(4, 6)), seed=0)
    img = ad.Tensor(np.zeros((1, 300, 300), dtype=np.float32))
    with ad.no_grad():
        out = model.forward(img)
    assert out.shape == (6, 150, 150)


def test_backbone_rejects_resolution_mismatch():
    model = Backbone(small_config(), seed=0)
    with pytest.raises(ValueError):
        model.forward(ad.Tensor(np.zeros((1, 50, 50), dtype=np.float32)))


def test_constant_image_silences_dog_branch():
    # zero-mean kernels respond only at the zero-padded border band
    model = Backbone(small_config(), seed=0)
    img = ad.Tensor(np.full((1, 60, 60), 0.7, dtype=np.float32))
    dog_out, _ = model.branch_outputs(img)
    assert np.max(np.abs(dog_out.data[:, 5:-5, 5:-5])) < 1e-5


def test_backbone_deterministic():
    model = Backbone(small_config(), seed=0)
    img = ad.Tensor(np.random.default_rng(4).random((1, 60, 60), dtype=np.float32))
    with ad.no_grad():
        a = model.forward(img).data.copy()
        b = model.forward(img).data.copy()
    assert np.array_equal(a, b)


def test_dog_branch_attends_to_wires():
    # mean |activation| on wire pixels >= 3x background at initialization,
    # measured away from the zero-padded border band
    rng = np.random.default_rng(5)
    n = 120
    img = 0.8 + 0.005 * rng.standard_normal((n, n))
    cols = np.arange(n)
    wire_col = 57
    img -= 0.35 * np.exp(-((cols - wire_col) ** 2) / (2 * 1.5**2))[None, :]
    model = Backbone(small_config(input_resolution=(n, n)), seed=0)
    dog_out, _ = model.branch_outputs(ad.Tensor(img[None].astype(np.float32)))
    mag = np.abs(dog_out.data).mean(axis=0)
    half_col = wire_col // 2
    band = 5
    interior = mag[band:-band, :]
    wire_mag = interior[:, half_col - 1 : half_col + 2].mean()
    bg = np.ones(mag.shape[1], dtype=bool)
    bg[half_col - 6 : half_col + 7] = False
    bg[:band] = False
    bg[-band:] = False
    bg_mag = interior[:, bg].mean()
    assert wire_mag >= 3.0 * bg_mag


def test_ablation_arms_compile_and_match_shapes():
    img = ad.Tensor(np.random.default_rng(6).random((1, 60, 60), dtype=np.float32))
    full = Backbone(small_config(), seed=0)
    no_attn = Backbone(small_config(use_attention=False), seed=0)
    plain = Backbone(small_config(use_dog=False, use_attention=False), seed=0)
    with ad.no_grad():
        for model in (full, no_attn, plain):
            assert model.forward(img).shape == (8, 30, 30)
    # the plain arm has random first-layer kernels of identical shape
    for ka, kb in zip(full.bank.dog_kernels, plain.bank.dog_kernels):
        assert ka.weights.shape == kb.weights.shape
    assert abs(plain.bank.dog_kernels[0].weights.data.sum()) > 1e-6


def test_backbone_gradients_flow_to_all_parameters():
    model = Backbone(small_config(), seed=0)
    img = ad.Tensor(np.random.default_rng(7).random((1, 60, 60), dtype=np.float32))
    out = model.forward(img)
    ad.backward(ad.mean_all(out))
    for name, p in model.parameters():
        assert p.grad is not None, name
        assert np.any(p.grad != 0) or "b" in name, name
