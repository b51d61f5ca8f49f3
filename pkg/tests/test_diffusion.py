import numpy as np
import pytest
import torch

from catsg.diffusion import (
    CaTSG,
    Denoiser,
    ModelConfig,
    corrupt,
    eps_loss,
    forward_corrupt,
    make_schedule,
    mix,
)
from catsg.errors import DataError, NumericalError
from catsg.train import TrainConfig, load_checkpoint, loss_terms, save_checkpoint, train

TINY = dict(H=8, unet_width=8, unet_res_blocks=1, n_diff=50)


def test_schedule_invariants():
    s = make_schedule(1000)
    ab = s.alpha_bars[1:]
    assert s.n_steps == 1000
    assert np.all(np.diff(ab) < 0) and ab[0] > 0.999
    assert np.all((s.betas[1:] > 0) & (s.betas[1:] <= 0.999))
    np.testing.assert_allclose(s.sigmas**2 + s.alpha_bars, 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        make_schedule(0)


def test_t_of_lambda_inverts_table():
    s = make_schedule(1000)
    lams = s.lambdas()
    for t in (1, 17, 500, 999, 1000):
        assert s.t_of_lambda(lams[t]) == pytest.approx(t, abs=1e-9)


def test_forward_corrupt_limits():
    x0, eps = torch.randn(3, 8, 1, dtype=torch.float64), torch.randn(3, 8, 1, dtype=torch.float64)
    assert torch.equal(corrupt(x0, torch.ones(3, dtype=torch.float64), eps), x0)
    assert torch.equal(corrupt(x0, torch.zeros(3, dtype=torch.float64), eps), eps)
    s = make_schedule(100)
    assert torch.equal(forward_corrupt(x0, 0, eps, s), x0)
    with pytest.raises(ValueError):
        forward_corrupt(x0, 101, eps, s)
    with pytest.raises(ValueError):
        forward_corrupt(x0, 1, eps[:, :4], s)


def test_forward_corrupt_mean():
    s = make_schedule(1000)
    x0 = torch.full((10_000, 1, 1), 2.0, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    xt = forward_corrupt(x0, 300, eps, s)
    expected = np.sqrt(s.alpha_bars[300]) * 2.0
    assert abs(xt.mean().item() - expected) < 4 * np.sqrt(1 - s.alpha_bars[300]) / 100


@pytest.mark.parametrize("T", [24, 64, 30])
def test_denoiser_shape(T):
    d = Denoiser(1, 2, 8, width=8, n_res=1)
    x = torch.randn(3, T, 1)
    out = d(x, torch.tensor([1.0, 5.0, 9.0]), torch.randn(3, T, 2), torch.randn(8))
    assert out.shape == x.shape
    with pytest.raises(ValueError):
        d(x, 1.0, torch.randn(3, T + 1, 2), torch.randn(8))


def test_mix():
    w = torch.tensor([[0.3, 0.7]])
    eps_env = torch.tensor([1.0, 2.0]).reshape(2, 1, 1, 1)
    assert mix(w, eps_env).item() == pytest.approx(1.7)


class _OracleDenoiser(torch.nn.Module):
    def __init__(self, eps):
        super().__init__()
        self.eps = eps
        self.null_env = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x_t, t, c_enc, env, null=None):
        reps = x_t.shape[0] // self.eps.shape[0]
        return self.eps.repeat(reps, 1, 1)


def _model(meta, **kw):
    return CaTSG(ModelConfig(**{**TINY, **kw}), meta, seed=0)


def test_eps_loss_oracle_zero(small_vm):
    m = _model(small_vm.meta)
    x0, c = m.to_model_space(small_vm["train"].x[:4], small_vm["train"].c[:4])
    eps = torch.randn(x0.shape)
    m.denoiser = _OracleDenoiser(eps)
    loss, _ = eps_loss(m, x0, m.ctx(c), 0.2, torch.Generator().manual_seed(0), eps=eps)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_eps_loss_scalar_toy(small_vm):
    m = _model(small_vm.meta, K=2)

    class Toy(torch.nn.Module):
        # branch k predicts the constant k + 1 everywhere
        def forward(self, x_t, t, c_enc, env, null=None):
            n = x_t.shape[0] // 2
            return torch.cat([torch.full((n, *x_t.shape[1:]), 1.0), torch.full((n, *x_t.shape[1:]), 2.0)])

    m.denoiser = Toy()
    x0 = torch.zeros(1, 64, 1)
    c_enc = torch.zeros(1, 64, 2)
    w = torch.tensor([[0.3, 0.7]])
    loss, _ = eps_loss(m, x0, c_enc, 0.0, eps=torch.full((1, 64, 1), 1.7), t=torch.tensor([5]), w=w)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    loss, _ = eps_loss(m, x0, c_enc, 0.0, eps=torch.zeros(1, 64, 1), t=torch.tensor([5]), w=w)
    assert loss.item() == pytest.approx(1.7**2, rel=1e-6)


def test_eps_loss_k1_matches_plain_conditional(small_vm):
    m = _model(small_vm.meta, K=1)
    x0, c = m.to_model_space(small_vm["train"].x[:8], small_vm["train"].c[:8])
    c_enc = m.ctx(c)
    t = torch.randint(1, 51, (8,), generator=torch.Generator().manual_seed(1))
    eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(2))
    drop = torch.zeros(1, 8, dtype=torch.bool)
    loss, w = eps_loss(m, x0, c_enc, 0.0, t=t, eps=eps, drop=drop)
    assert torch.equal(w, torch.ones(8, 1))
    x_t = forward_corrupt(x0, t, eps, m.schedule)
    plain = ((eps - m.denoiser(x_t, t, c_enc, m.env_rows()[0], null=drop[0])) ** 2).mean()
    assert torch.equal(loss, plain)


def test_eps_loss_uses_clean_pair_posterior(small_vm):
    m = _model(small_vm.meta)
    x0, c = m.to_model_space(small_vm["train"].x[:8], small_vm["train"].c[:8])
    c_enc = m.ctx(c)
    _, w = eps_loss(m, x0, c_enc, 0.2, torch.Generator().manual_seed(0))
    assert torch.allclose(w, m.infer(x0, c_enc).w)
    assert not w.requires_grad


def test_null_token_changes_output(small_vm):
    m = _model(small_vm.meta)
    x0, c = m.to_model_space(small_vm["train"].x[:4], small_vm["train"].c[:4])
    c_enc = m.ctx(c)
    e = m.env_rows()[0]
    a = m.denoiser(x0, 10.0, c_enc, e)
    b = m.denoiser(x0, 10.0, c_enc, e, null=torch.ones(4, dtype=torch.bool))
    assert not torch.allclose(a, b)


def _grads(terms, model):
    model.zero_grad(set_to_none=True)
    terms.total.backward()
    return {n: p.grad for n, p in model.named_parameters()}


def _terms(small_vm, ablation, warm=False, cfg=None):
    m = _model(small_vm.meta, ablation=ablation)
    x0, c = m.to_model_space(small_vm["train"].x[:16], small_vm["train"].c[:16])
    terms = loss_terms(m, x0, c, cfg or TrainConfig(), torch.Generator().manual_seed(0), warm=warm)
    return m, terms


def test_full_has_all_terms(small_vm):
    m, t = _terms(small_vm, "full")
    assert t.eps is not None and t.sw is not None and t.orth is not None
    g = _grads(t, m)
    assert g["bank.E"] is not None and g["envinfer.mlp.0.weight"] is not None


def test_warmup_has_no_eps(small_vm):
    m, t = _terms(small_vm, "full", warm=True)
    assert t.eps is None and t.sw is not None
    assert _grads(t, m)["denoiser.unet.stem.weight"] is None


def test_no_sw_drops_swapped_loss(small_vm):
    m, t = _terms(small_vm, "no_sw")
    assert t.sw is None and t.orth is not None
    # the encoder is only reached through the swapped loss (w is detached)
    assert _grads(t, m)["envinfer.mlp.0.weight"] is None


def test_frozen_env(small_vm):
    m, t = _terms(small_vm, "frozen_env")
    assert not m.bank.E.requires_grad
    assert t.orth is None and t.sw is not None
    assert _grads(t, m)["bank.E"] is None


def test_no_env(small_vm):
    m, t = _terms(small_vm, "no_env")
    assert m.bank is None and m.envinfer is None
    assert t.sw is None and t.orth is None and t.w is None
    assert not any("bank" in n or "envinfer" in n for n, _ in m.named_parameters())


def test_rand_env_weights_are_random(small_vm):
    m = _model(small_vm.meta, ablation="rand_env")
    x0, c = m.to_model_space(small_vm["train"].x[:16], small_vm["train"].c[:16])
    c_enc = m.ctx(c)
    w1 = m.posterior(x0, c_enc, torch.Generator().manual_seed(0))
    w2 = m.posterior(x0, c_enc, torch.Generator().manual_seed(1))
    assert torch.allclose(w1.sum(-1), torch.ones(16), atol=1e-6)
    assert not torch.allclose(w1, w2)
    assert not torch.allclose(w1, m.infer(x0, c_enc).w)


def test_sw_disabled_after_warmup_option(small_vm):
    _, t = _terms(small_vm, "full", cfg=TrainConfig(sw_after_warmup=False))
    assert t.sw is None and t.orth is not None
    _, t = _terms(small_vm, "full", warm=True, cfg=TrainConfig(sw_after_warmup=False))
    assert t.sw is not None


def test_training_smoke_decreases_eps(small_vm):
    m = train(small_vm, ModelConfig(**TINY), TrainConfig(steps=50, warmup_steps=5, batch_size=64, log_every=0))
    eps = [h["eps"] for h in m.history if h["eps"] is not None]
    assert len(eps) == 50
    assert np.mean(eps[-10:]) < np.mean(eps[:10])


def test_training_deterministic(small_vm):
    cfg = TrainConfig(steps=4, warmup_steps=2, batch_size=16, log_every=0)
    a = train(small_vm, ModelConfig(**TINY), cfg)
    b = train(small_vm, ModelConfig(**TINY), cfg)
    for (k, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), k


def test_checkpoint_roundtrip(tmp_path, small_vm):
    m = train(small_vm, ModelConfig(**TINY), TrainConfig(steps=3, warmup_steps=1, batch_size=8, log_every=0))
    path = save_checkpoint(m, tmp_path / "m.ckpt", m.train_cfg, m.history)
    back = load_checkpoint(path)
    assert back.step == m.step and back.cfg == m.cfg and back.history == m.history
    x0, c = m.to_model_space(small_vm["test"].x[:4], small_vm["test"].c[:4])
    with torch.no_grad():
        a = m.branch_noise(x0, 7.0, m.ctx(c))
        b = back.branch_noise(x0, 7.0, back.ctx(c))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    save_checkpoint(back, tmp_path / "again.ckpt", back.train_cfg, back.history)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_nan_loss_aborts_with_snapshot(tmp_path, small_vm):
    bad = small_vm
    x = bad["train"].x.copy()
    bad_split = type(bad["train"])(x=x * np.nan, c=bad["train"].c, params=bad["train"].params)
    bundle = type(bad)(meta=bad.meta, splits={**bad.splits, "train": bad_split})
    with pytest.raises(NumericalError):
        train(bundle, ModelConfig(**TINY), TrainConfig(steps=2, warmup_steps=0, batch_size=8, log_every=0),
              out_path=tmp_path / "m.ckpt")
    assert (tmp_path / "m.ckpt.nan-snapshot").exists()


def test_invalid_configs():
    with pytest.raises(ValueError):
        ModelConfig(ablation="nope")
    with pytest.raises(ValueError):
        TrainConfig(p_drop=1.5)
    with pytest.raises(ValueError):
        TrainConfig(alpha_sw=-1)


def test_v_parametrization_identities():
    s = make_schedule(1000)
    d = Denoiser(1, 2, 8, width=8, n_res=1, schedule=s, parametrization="v")
    torch.nn.init.zeros_(d.unet.head[2].weight)
    torch.nn.init.zeros_(d.unet.head[2].bias)
    x = torch.randn(3, 16, 1)
    c, e = torch.zeros(3, 16, 2), torch.zeros(8)
    t = torch.tensor([1.0, 500.0, 1000.0])
    out = d(x, t, c, e)  # F = 0 gives eps = sigma_t x_t
    sig = torch.as_tensor(s.sigmas[[1, 500, 1000]], dtype=torch.float32)
    assert torch.allclose(out, sig[:, None, None] * x, rtol=1e-5, atol=1e-6)
    assert torch.allclose(d.alpha_bar(torch.tensor([1.0, 1000.0])).float(),
                          torch.as_tensor(s.alpha_bars[[1, 1000]], dtype=torch.float32), rtol=1e-6)


def test_v_parametrization_needs_schedule():
    with pytest.raises(ValueError):
        Denoiser(1, 2, 8, parametrization="v")
    with pytest.raises(ValueError):
        ModelConfig(parametrization="x0")
