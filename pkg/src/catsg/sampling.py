"""Backdoor-adjusted guided sampling.

Interventional and counterfactual generation share one reverse loop and
differ only in where the environment weights come from (re-inferred from
the current noisy state at every evaluation, or abducted once from the
factual pair and frozen) and in which context conditions the denoiser.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError

SAMPLERS = ("ddpm", "dpm_solver_2s")
_ALIASES = {"dpms2": "dpm_solver_2s", "dpm-solver-2s": "dpm_solver_2s"}


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 1.0
    steps: int = 20
    sampler: str = "dpm_solver_2s"
    seed: int = 0
    # x0 predictions are clipped to [-clip_x0, 1 + clip_x0] in model space
    # (train range is [0, 1]); None disables clipping
    clip_x0: float | None = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sampler", _ALIASES.get(self.sampler, self.sampler))
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if self.omega < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.omega}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.clip_x0 is not None and not self.clip_x0 >= 0:
            raise ValueError(f"clip_x0 must be >= 0 or None, got {self.clip_x0}")


def combine_guidance(eps_env, eps_base, w, omega):
    """(1 + omega) * sum_k w_k eps_env[k] - omega * eps_base."""
    assert torch.all(w >= 0) and torch.allclose(w.sum(-1), torch.ones((), dtype=w.dtype), atol=1e-5), \
        "environment weights must lie on the simplex"
    mixed = (w.T[:, :, None, None] * eps_env).sum(dim=0)
    return (1.0 + omega) * mixed - omega * eps_base


def backdoor_noise(model, x_t, t, c_enc, w, omega):
    eps_env, eps_base = model.branch_noise(x_t, t, c_enc)
    if not model.has_env:
        w = torch.ones(x_t.shape[0], 1, dtype=x_t.dtype)
    return combine_guidance(eps_env, eps_base, w, omega)


def ddpm_step(x_t, eps_hat, t, schedule, generator=None, t_prev=None):
    """One ancestral step from ``t`` to ``t_prev`` (default t - 1).

    Uses variance beta (the respaced beta when skipping steps) and no noise
    when landing on t_prev = 0.
    """
    if t < 1:
        raise ValueError("ddpm_step needs t >= 1")
    t_prev = t - 1 if t_prev is None else t_prev
    ab_t = float(schedule.alpha_bars[t])
    ab_prev = float(schedule.alpha_bars[t_prev])
    beta = 1.0 - ab_t / ab_prev
    alpha = 1.0 - beta
    mean = (x_t - beta / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha)
    if t_prev == 0:
        return mean
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(beta) * noise


def _ab_sigma(lam):
    # alpha_bar = sigmoid(2 lambda), computed stably
    return math.sqrt(_sigmoid(2 * lam)), math.sqrt(_sigmoid(-2 * lam))


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def dpm_solver_2s_step(x, lam_i, lam_next, schedule, eps_fn):
    """Second-order single-step DPM-Solver update between half log-SNRs.

    ``eps_fn(x, t)`` is called with fractional diffusion steps ``t``.
    """
    h = lam_next - lam_i
    if not h > 0:
        raise ValueError("DPM-Solver needs strictly increasing half log-SNR")
    lam_s = lam_i + 0.5 * h
    a_i, _ = _ab_sigma(lam_i)
    a_s, s_s = _ab_sigma(lam_s)
    a_n, s_n = _ab_sigma(lam_next)
    eps_i = eps_fn(x, schedule.t_of_lambda(lam_i))
    u = (a_s / a_i) * x - s_s * math.expm1(0.5 * h) * eps_i
    eps_s = eps_fn(u, schedule.t_of_lambda(lam_s))
    return (a_n / a_i) * x - s_n * math.expm1(h) * eps_s


def ddpm_timesteps(schedule, steps):
    if steps > schedule.n_steps:
        raise ValueError(f"steps ({steps}) exceeds diffusion length {schedule.n_steps}")
    ts = np.unique(np.round(np.linspace(schedule.n_steps, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


# The cosine schedule's last few steps carry almost no signal; starting the
# solver at this fraction of N keeps steps from being spent there.
T_START_FRAC = 0.9946


def lambda_grid(schedule, steps, t_start_frac=T_START_FRAC):
    """Uniform half log-SNR grid from t = t_start_frac * N down to t = 1."""
    if steps > schedule.n_steps:
        raise ValueError(f"steps ({steps}) exceeds diffusion length {schedule.n_steps}")
    lams = schedule.lambdas()[1:]
    t0 = max(1.0, t_start_frac * schedule.n_steps)
    lam0 = np.interp(t0, np.arange(1, schedule.n_steps + 1, dtype=np.float64), lams)
    return np.linspace(lam0, lams[0], steps + 1)


def clip_eps(x_t, eps_hat, t, schedule, margin):
    """Noise estimate consistent with the x0 prediction clipped to the data band.

    Near t = N the signal coefficient is ~1e-5, so small noise errors turn
    into huge x0 errors; bounding x0 keeps the first reverse steps stable.
    """
    if margin is None:
        return eps_hat
    ab = schedule.alpha_bar_at(t)
    a, sig = math.sqrt(ab), math.sqrt(1.0 - ab)
    x0 = ((x_t - sig * eps_hat) / a).clamp(-margin, 1.0 + margin)
    return (x_t - a * x0) / sig


def _integrate(eps_fn, x_T, cfg, schedule, generator):
    def guarded(x, t):
        return clip_eps(x, eps_fn(x, t), t, schedule, cfg.clip_x0)

    x = x_T
    if cfg.sampler == "ddpm":
        ts = ddpm_timesteps(schedule, cfg.steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            x = ddpm_step(x, guarded(x, float(t)), t, schedule, generator, t_prev)
    else:
        lams = lambda_grid(schedule, cfg.steps)
        for lam_i, lam_next in zip(lams[:-1], lams[1:]):
            x = dpm_solver_2s_step(x, float(lam_i), float(lam_next), schedule, guarded)
    return x


def reverse_loop(model, c_enc, weights, cfg, generator, x_T=None):
    """Shared reverse diffusion in model space.

    ``weights`` is either a fixed (N, K) tensor or a callable
    ``(x_t, t) -> w`` evaluated at every denoiser evaluation.
    """
    N = c_enc.shape[0]
    if x_T is None:
        x_T = torch.randn((N, model.T, model.D), generator=generator)
    weight_fn = weights if callable(weights) else (lambda x, t: weights)

    def eps_fn(x, t):
        w = weight_fn(x, t) if model.has_env else None
        return backdoor_noise(model, x, t, c_enc, w, cfg.omega)

    return _integrate(eps_fn, x_T, cfg, model.schedule, generator)


def _check_context(model, c):
    if c.ndim != 3 or c.shape[1] != model.T or c.shape[2] != model.D_c:
        raise DataError(
            f"context shape {tuple(c.shape)} incompatible with checkpoint (T={model.T}, D_c={model.D_c})"
        )


@torch.no_grad()
def sample_interventional(model, c, cfg=GuidanceConfig(), x_T=None, return_model_space=False):
    """Draw x ~ P(X | do(C = c)) for bundle-space contexts ``c`` (N, T, D_c).

    Environment weights are re-inferred from (x_t, c) at every denoiser
    evaluation. Returns samples in physical units.
    """
    c = np.asarray(c)
    _check_context(model, c)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    c_m = model.to_model_space(c=c)
    c_enc = model.ctx(c_m)

    def stepwise(x_t, t):
        return model.posterior(x_t, c_enc, gen)

    x0 = reverse_loop(model, c_enc, stepwise, cfg, gen, x_T)
    return x0 if return_model_space else model.normalizer.x_inverse(x0.numpy())


@torch.no_grad()
def sample_counterfactual(model, x0, c, c_prime, cfg=GuidanceConfig(), x_T=None, return_model_space=False):
    """Abduction-action-prediction for factual pairs (x0, c) under c_prime.

    The posterior is inferred once from the factual pair and held fixed for
    the whole reverse trajectory, which starts from fresh Gaussian noise.
    """
    if x0 is None or c is None:
        raise DataError("counterfactual sampling needs the factual pair (x0, c)")
    x0, c, c_prime = np.asarray(x0), np.asarray(c), np.asarray(c_prime)
    _check_context(model, c)
    _check_context(model, c_prime)
    if x0.shape[0] != c.shape[0] or c.shape[0] != c_prime.shape[0]:
        raise DataError("factual and counterfactual batches differ in size")
    gen = torch.Generator().manual_seed(int(cfg.seed))
    x_m, c_m = model.to_model_space(x0, c)
    w = abduct(model, x_m, model.ctx(c_m), gen)
    c_enc_prime = model.ctx(model.to_model_space(c=c_prime))
    out = reverse_loop(model, c_enc_prime, w, cfg, gen, x_T)
    return out if return_model_space else model.normalizer.x_inverse(out.numpy())


def abduct(model, x_m, c_enc, generator=None):
    if not model.has_env:
        return None
    return model.posterior(x_m, c_enc, generator)


@torch.no_grad()
def sample_plain_conditional(model, c, cfg=GuidanceConfig(), env_index=0, x_T=None):
    """Reference sampler using only eps(x_t, t, c, e_k) for one k."""
    c = np.asarray(c)
    _check_context(model, c)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    c_enc = model.ctx(model.to_model_space(c=c))
    if x_T is None:
        x_T = torch.randn((c.shape[0], model.T, model.D), generator=gen)
    env = model.env_rows()[env_index]

    def eps_fn(x, t):
        return model.denoiser(x, t, c_enc, env)

    x = _integrate(eps_fn, x_T, cfg, model.schedule, gen)
    return model.normalizer.x_inverse(x.numpy())
