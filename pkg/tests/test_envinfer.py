import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from catsg.errors import NumericalError
from catsg.envinfer import (
    Augmenter,
    EnvBank,
    EnvInfer,
    SinkhornConfig,
    TemporalFeatures,
    circular_shift,
    cross_entropy,
    orthogonality_loss,
    score,
    sinkhorn_targets,
    swapped_loss_from_logits,
)

SK100 = SinkhornConfig(reg=0.05, iters=100)


def test_encode_shape_and_zero():
    enc = EnvInfer(3, 8)
    for N, T in ((2, 24), (5, 64)):
        assert enc.encode(torch.randn(N, T, 1), torch.randn(N, T, 2)).shape == (N, T, 8)
    torch.nn.init.zeros_(enc.tcn.out.weight)
    torch.nn.init.zeros_(enc.tcn.out.bias)
    out = enc.encode(torch.zeros(2, 16, 1), torch.zeros(2, 16, 2))
    assert torch.equal(out, torch.zeros_like(out))


def test_encode_rejects_length_mismatch():
    with pytest.raises(ValueError):
        EnvInfer(3, 8).encode(torch.zeros(2, 16, 1), torch.zeros(2, 15, 2))


def test_constant_features():
    f = TemporalFeatures(3, 4)
    h = torch.full((2, 32, 3), 0.7, dtype=torch.float64)
    out = f.double()(h)
    mean, std, mx = out[:, :3], out[:, 3:6], out[:, 6:9]
    centroid = out[:, 12:15]
    assert torch.allclose(mean, torch.full_like(mean, 0.7))
    assert torch.allclose(mx, torch.full_like(mx, 0.7))
    assert torch.all(std < 1e-9)
    assert torch.all(centroid.abs() < 1e-12)


def test_sinusoid_centroid():
    T, f0 = 64, 5
    t = torch.arange(T, dtype=torch.float64)
    h = torch.zeros(1, T, 2, dtype=torch.float64)
    h[0, :, 0] = torch.cos(2 * math.pi * f0 * t / T)
    h[0, :, 1] = 1.0
    centroid, _ = TemporalFeatures(2).spectral(h)
    assert abs(centroid[0, 0].item() - f0) < 1e-9


def test_attention_weights_sum_to_one():
    f = TemporalFeatures(4)
    a = f.attention_weights(torch.randn(3, 20, 4))
    assert torch.allclose(a.sum(dim=1), torch.ones(3, 1), atol=1e-6)


def test_single_step_series_warns():
    with pytest.warns(RuntimeWarning):
        out = TemporalFeatures(2)(torch.randn(1, 1, 2))
    assert torch.all(out[:, 2:4] <= 1e-9)


def test_forward_simplex_and_limits():
    torch.manual_seed(0)
    enc = EnvInfer(3, 8)
    x, c = torch.randn(6, 32, 1), torch.randn(6, 32, 2)
    out = enc(x, c, EnvBank(4, 8))
    assert torch.allclose(out.w.sum(-1), torch.ones(6), atol=1e-6) and torch.all(out.w >= 0)
    assert torch.equal(enc(x, c, EnvBank(1, 8)).w, torch.ones(6, 1))
    w = enc(x, c, EnvBank(4, 8), tau=1e6).w
    assert torch.allclose(w, torch.full_like(w, 0.25), atol=1e-6)
    assert enc.tau == 0.1


def test_empty_bank_rejected():
    with pytest.raises(ValueError):
        EnvBank(0, 4)


def test_score_scale_invariance():
    h, E = torch.randn(5, 8), torch.randn(3, 8)
    assert torch.allclose(score(h, E, 0.1), score(3.7 * h, E, 0.1), atol=1e-5)


@pytest.mark.parametrize("N", [8, 64])
@pytest.mark.parametrize("K", [2, 8])
def test_sinkhorn_marginals(N, K):
    torch.manual_seed(N * K)
    q = sinkhorn_targets(torch.randn(N, K, dtype=torch.float64), 0.1, SK100)
    assert torch.allclose(q.sum(1), torch.ones(N, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(q.sum(0), torch.full((K,), N / K, dtype=torch.float64), atol=1e-6)


def test_sinkhorn_symmetric_case():
    q = sinkhorn_targets(torch.zeros(2, 2), 0.1, SK100)
    assert torch.allclose(q, torch.full((2, 2), 0.5))


def test_sinkhorn_balances_skewed_logits():
    s = torch.tensor([[5.0, -5.0]] * 4, dtype=torch.float64)
    q = sinkhorn_targets(s, 0.1, SK100)
    assert torch.allclose(q.sum(0), torch.tensor([2.0, 2.0], dtype=torch.float64), atol=1e-6)


def test_sinkhorn_no_grad_and_finite_check():
    s = torch.randn(4, 3, requires_grad=True)
    assert not sinkhorn_targets(s, 0.1).requires_grad
    with pytest.raises(NumericalError):
        sinkhorn_targets(torch.tensor([[float("nan"), 0.0]]), 0.1)
    with pytest.raises(ValueError):
        SinkhornConfig(iters=0)


def test_swapped_loss_zero_for_agreeing_one_hots():
    target = torch.eye(4)
    logits = torch.eye(4) * 1e4
    assert cross_entropy(target, logits).item() == pytest.approx(0.0, abs=1e-6)


def test_swapped_loss_uniform_prediction():
    s = torch.zeros(16, 4)
    assert swapped_loss_from_logits(s, s, 0.1, SK100).item() == pytest.approx(2 * math.log(4), rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 10_000))
def test_swapped_loss_nonnegative(N, K, seed):
    g = torch.Generator().manual_seed(seed)
    s1, s2 = torch.randn(N, K, generator=g) * 5, torch.randn(N, K, generator=g) * 5
    assert swapped_loss_from_logits(s1, s2, 0.1).item() >= 0


def test_swapped_loss_batch_one_warns():
    with pytest.warns(RuntimeWarning):
        swapped_loss_from_logits(torch.randn(1, 3), torch.randn(1, 3), 0.1)


def test_orthogonality_loss_cases():
    assert orthogonality_loss(torch.eye(3, 5) * 2.0).item() == pytest.approx(0.0, abs=1e-12)
    E = torch.tensor([[1.0, 2.0], [1.0, 2.0]])
    assert orthogonality_loss(E).item() == pytest.approx(2.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_orthogonality_loss_nonnegative(K, H, seed):
    E = torch.randn(K, H, generator=torch.Generator().manual_seed(seed))
    assert orthogonality_loss(E).item() >= 0


def test_augment_determinism_and_identity():
    x, c = torch.randn(4, 32, 1), torch.randn(4, 32, 2)
    aug = Augmenter()
    a1 = aug(x, c, torch.Generator().manual_seed(9))
    a2 = aug(x, c, torch.Generator().manual_seed(9))
    assert torch.equal(a1[0], a2[0]) and torch.equal(a1[1], a2[1])
    null = Augmenter(jitter=0.0, scale_range=(1.0, 1.0), max_shift_frac=0.0)
    xv, cv = null(x, c, torch.Generator().manual_seed(1))
    assert torch.equal(xv, x) and torch.equal(cv, c)


def test_augment_is_synchronized():
    t = torch.arange(32, dtype=torch.float32)
    x = t.repeat(3, 1)[..., None]
    c = torch.cat([x, x], dim=-1)
    aug = Augmenter(jitter=0.0, scale_range=(1.0, 1.0))
    xv, cv = aug(x, c, torch.Generator().manual_seed(3))
    assert torch.equal(cv[..., :1], xv) and torch.equal(cv[..., 1:], xv)


def test_circular_shift_period():
    x = torch.randn(3, 16, 2)
    assert torch.equal(circular_shift(x, torch.tensor([16, -16, 32])), x)
    assert torch.equal(circular_shift(x, torch.tensor([1, 1, 1])), torch.roll(x, 1, dims=1))


def test_augment_leaves_categorical_untouched():
    x = torch.randn(2, 16, 1)
    c = torch.stack([torch.randn(2, 16), torch.full((2, 16), 3.0)], dim=-1)
    mask = torch.tensor([True, False])
    _, cv = Augmenter(max_shift_frac=0.0)(x, c, torch.Generator().manual_seed(0), c_mask=mask)
    assert torch.equal(cv[..., 1], c[..., 1])
