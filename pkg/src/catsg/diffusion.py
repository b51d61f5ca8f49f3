"""Noise schedule, conditioned U-Net denoiser, model container, mixture loss."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .bundle import Normalizer
from .envinfer import EnvBank, EnvInfer
from .layers import ContextEncoder, UNet1d

ABLATIONS = ("full", "rand_env", "no_sw", "frozen_env", "no_env")


@dataclass
class DiffusionSchedule:
    """Tables indexed by step t = 0..N (t = 0 is the clean data)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "cosine"

    @property
    def n_steps(self):
        return len(self.betas) - 1

    @property
    def sigmas(self):
        return np.sqrt(1.0 - self.alpha_bars)

    def lambdas(self):
        """Half log-SNR, log(sqrt(alpha_bar) / sigma)."""
        ab = self.alpha_bars[1:]
        return np.concatenate([[np.inf], 0.5 * (np.log(ab) - np.log1p(-ab))])

    def alpha_bar_at(self, t):
        """alpha_bar at a possibly fractional step, interpolating half log-SNR."""
        t = float(t)
        if t <= 0:
            return 1.0
        lams = self.lambdas()[1:]
        lam = float(np.interp(t, np.arange(1, self.n_steps + 1, dtype=np.float64), lams))
        return 1.0 / (1.0 + math.exp(-2.0 * lam))

    def t_of_lambda(self, lam):
        """Fractional step with half log-SNR ``lam`` (linear interpolation)."""
        lams = self.lambdas()[1:]  # decreasing in t
        steps = np.arange(1, self.n_steps + 1, dtype=np.float64)
        return float(np.interp(-lam, -lams, steps))


def make_schedule(n_diff=1000, kind="cosine", s=0.008, max_beta=0.999):
    if n_diff < 1:
        raise ValueError(f"n_diff must be >= 1, got {n_diff}")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    t = np.arange(n_diff + 1, dtype=np.float64) / n_diff
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    ab = f / f[0]
    betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, max_beta)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return DiffusionSchedule(
        betas=np.concatenate([[0.0], betas]),
        alphas=np.concatenate([[1.0], alphas]),
        alpha_bars=alpha_bars,
        kind=kind,
    )


def corrupt(x0, alpha_bar, eps):
    alpha_bar = torch.as_tensor(alpha_bar, dtype=x0.dtype)
    while alpha_bar.dim() < x0.dim():
        alpha_bar = alpha_bar[..., None]
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def forward_corrupt(x0, t, eps, schedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps for integer steps ``t``."""
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0 in shape")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.min() < 0 or t.max() > schedule.n_steps:
        raise ValueError(f"step out of range [0, {schedule.n_steps}]")
    ab = torch.as_tensor(schedule.alpha_bars, dtype=torch.float64)[t]
    if ab.numel() == 1:
        ab = ab.expand(x0.shape[0])
    return corrupt(x0, ab.to(x0.dtype), eps)


PARAMETRIZATIONS = ("v", "eps")


@dataclass
class ModelConfig:
    K: int = 4
    H: int = 32
    unet_width: int = 16
    unet_res_blocks: int = 2
    n_diff: int = 1000
    schedule: str = "cosine"
    n_peaks: int = 4
    tau: float = 0.1
    cat_emb_dim: int = 4
    ablation: str = "full"
    # "v": the U-Net output F maps to eps = sigma_t x_t + sqrt(alpha_bar_t) F;
    # "eps": the U-Net output is the noise estimate itself
    parametrization: str = "v"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"parametrization must be one of {PARAMETRIZATIONS}, got {self.parametrization!r}")


class Denoiser(nn.Module):
    """eps_theta(x_t, t, d) with d = (c, e) or the null token.

    Context channels and the time-broadcast environment vector are
    concatenated to the noisy input. The null token zeroes the context and
    substitutes a learned null environment vector.

    With a schedule and ``parametrization="v"`` the network output F is
    read as a velocity, so the implied x0 = sqrt(alpha_bar) x_t - sigma F
    never divides by the vanishing signal coefficient near t = N.
    """

    def __init__(self, D, D_ce, H, width=16, n_res=2, schedule=None, parametrization="eps"):
        super().__init__()
        self.D, self.D_ce, self.H = D, D_ce, H
        self.unet = UNet1d(D + D_ce + H, D, width=width, n_res=n_res)
        self.null_env = nn.Parameter(torch.randn(H) * 0.1)
        if parametrization == "v" and schedule is None:
            raise ValueError("v parametrization needs a schedule")
        self.parametrization = parametrization
        if schedule is not None:
            lams = torch.as_tensor(schedule.lambdas()[1:], dtype=torch.float64)
            self.register_buffer("_lams", lams, persistent=False)

    def alpha_bar(self, t):
        """alpha_bar at (fractional) steps t >= 1, interpolating half log-SNR."""
        pos = (t.to(torch.float64) - 1.0).clamp(0, len(self._lams) - 1)
        lo = pos.floor().long()
        hi = (lo + 1).clamp(max=len(self._lams) - 1)
        lam = torch.lerp(self._lams[lo], self._lams[hi], pos - lo)
        return torch.sigmoid(2.0 * lam)

    def forward(self, x_t, t, c_enc, env, null=None):
        N, T, _ = x_t.shape
        if c_enc.shape[:2] != (N, T):
            raise ValueError(f"context shape {tuple(c_enc.shape)} does not match x_t {tuple(x_t.shape)}")
        env = env.expand(N, self.H) if env.dim() == 1 else env
        if null is not None:
            keep = (~null).to(x_t.dtype)
            c_enc = c_enc * keep[:, None, None]
            env = torch.where(null[:, None], self.null_env.expand(N, self.H).to(env.dtype), env)
        t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
        if t.numel() == 1:
            t = t.expand(N)
        inp = torch.cat([x_t, c_enc, env[:, None, :].expand(N, T, self.H)], dim=-1)
        out = self.unet(inp.transpose(1, 2), t).transpose(1, 2)
        if self.parametrization == "eps":
            return out
        ab = self.alpha_bar(t)[:, None, None]
        return (torch.sqrt(1.0 - ab) * x_t + torch.sqrt(ab) * out).to(out.dtype)


class CaTSG(nn.Module):
    """Denoiser + EnvInfer + environment bank, bound to dataset metadata."""

    def __init__(self, cfg, meta, seed=0):
        super().__init__()
        self.cfg = cfg
        self.meta = dict(meta)
        self.D, self.D_c, self.T = int(meta["D"]), int(meta["D_c"]), int(meta["T"])
        kinds = meta["channel_kinds"][self.D:]
        with torch.random.fork_rng():
            torch.manual_seed(int(seed))
            self.ctx = ContextEncoder(kinds, _vocab_sizes(meta), cfg.cat_emb_dim)
            D_ce = self.ctx.out_dim
            if cfg.ablation == "no_env":
                self.envinfer = None
                self.bank = None
            else:
                self.envinfer = EnvInfer(self.D + D_ce, cfg.H, cfg.n_peaks, cfg.tau)
                self.bank = EnvBank(cfg.K, cfg.H)
                if cfg.ablation == "frozen_env":
                    self.bank.E.requires_grad_(False)
            self.schedule = make_schedule(cfg.n_diff, cfg.schedule)
            self.denoiser = Denoiser(self.D, D_ce, cfg.H, cfg.unet_width, cfg.unet_res_blocks,
                                     self.schedule, cfg.parametrization)
        self.normalizer = Normalizer(meta)
        self.step = 0

    @property
    def has_env(self):
        return self.bank is not None

    @property
    def K(self):
        return self.bank.K if self.has_env else 0

    def env_rows(self):
        return self.bank.normalized()

    def infer(self, x, c_enc):
        return self.envinfer(x, c_enc, self.bank)

    def posterior(self, x, c_enc, generator=None):
        """Weights over the bank used by the loss and the guidance rule."""
        if self.cfg.ablation == "rand_env":
            return random_simplex(x.shape[0], self.K, generator, x.dtype)
        return self.infer(x, c_enc).w

    def branch_noise(self, x_t, t, c_enc):
        """Per-environment predictions (K, N, T, D) and the null prediction.

        Each branch is a separate call with batch N, so results do not
        depend on how many branches are evaluated.
        """
        N = x_t.shape[0]
        if self.has_env:
            rows = self.env_rows()
            eps_env = torch.stack([self.denoiser(x_t, t, c_enc, rows[k]) for k in range(self.K)])
        else:
            zero = torch.zeros(self.cfg.H, dtype=x_t.dtype)
            eps_env = self.denoiser(x_t, t, c_enc, zero)[None]
        eps_base = self.denoiser(x_t, t, c_enc, torch.zeros(self.cfg.H, dtype=x_t.dtype),
                                 null=torch.ones(N, dtype=torch.bool))
        return eps_env, eps_base

    def to_model_space(self, x=None, c=None):
        out = []
        if x is not None:
            out.append(torch.from_numpy(self.normalizer.x(x)))
        if c is not None:
            out.append(torch.from_numpy(self.normalizer.c(c)))
        return out[0] if len(out) == 1 else tuple(out)


def random_simplex(N, K, generator=None, dtype=torch.float32):
    """Uniform draws on the K-simplex (Dirichlet(1))."""
    e = -torch.log(torch.rand(N, K, generator=generator, dtype=torch.float64).clamp_min(1e-300))
    return (e / e.sum(dim=-1, keepdim=True)).to(dtype)


def mix(w, eps_env):
    """sum_k w[:, k] * eps_env[k] for w (N, K) and eps_env (K, N, T, D)."""
    return (w.T[:, :, None, None] * eps_env).sum(dim=0)


@dataclass
class LossTerms:
    eps: torch.Tensor | None = None
    sw: torch.Tensor | None = None
    orth: torch.Tensor | None = None
    total: torch.Tensor | None = None
    w: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


def eps_loss(model, x0, c_enc, p_drop, generator=None, t=None, eps=None, drop=None, w=None):
    """Mixture noise-regression loss.

    For each k the condition (c, e_k) is independently replaced by the null
    token with probability ``p_drop``; the weighted sum over k sits inside
    the squared norm. ``w`` defaults to the (detached) posterior of the
    clean pair.
    """
    N = x0.shape[0]
    sched = model.schedule
    if t is None:
        t = torch.randint(1, sched.n_steps + 1, (N,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_corrupt(x0, t, eps, sched)
    K = max(model.K, 1)
    if drop is None:
        drop = torch.rand(K, N, generator=generator) < p_drop
    if not model.has_env:
        zero = torch.zeros(model.cfg.H, dtype=x0.dtype)
        eps_hat = model.denoiser(x_t, t, c_enc, zero, null=drop[0])
        return ((eps - eps_hat) ** 2).mean(), None
    if w is None:
        w = model.posterior(x0, c_enc, generator).detach()
    rows = model.env_rows()
    env = rows.repeat_interleave(N, dim=0)
    eps_all = model.denoiser(
        x_t.repeat(K, 1, 1), t.repeat(K), c_enc.repeat(K, 1, 1), env, null=drop.reshape(-1)
    ).reshape(K, *x0.shape)
    eps_hat = mix(w, eps_all)
    return ((eps - eps_hat) ** 2).mean(), w


def _vocab_sizes(meta):
    D = int(meta["D"])
    names = meta["channel_names"][D:]
    vocab = meta.get("vocab", {})
    return {str(i): len(vocab[n]) for i, n in enumerate(names) if n in vocab}


def config_dict(cfg):
    return asdict(cfg)
