"""Environment inference: encoder, bank scoring, balanced targets, losses."""

import logging
import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericalError
from .layers import TCN

log = logging.getLogger(__name__)


class EnvBank(nn.Module):
    """K x H learnable environment embeddings.

    Stored rows are unconstrained; scoring and the orthogonality loss both
    use l2-normalized copies.
    """

    def __init__(self, K, H, generator=None):
        super().__init__()
        if K < 1 or H < 1:
            raise ValueError(f"environment bank needs K >= 1 and H >= 1, got K={K}, H={H}")
        self.E = nn.Parameter(torch.randn(K, H, generator=generator))

    @property
    def K(self):
        return self.E.shape[0]

    def normalized(self):
        return F.normalize(self.E, dim=-1)


class TemporalFeatures(nn.Module):
    """Summary features of an (N, T, H) sequence -> (N, 5H + n_peaks).

    Concatenates time mean/std/max, an attention-pooled vector, the per-
    channel spectral centroid (in FFT-bin units) and the ``n_peaks`` largest
    channel-averaged periodogram values (log1p-compressed).
    """

    def __init__(self, H, n_peaks=4):
        super().__init__()
        self.attn = nn.Linear(H, 1)
        self.n_peaks = n_peaks
        self.out_dim = 5 * H + n_peaks

    def forward(self, h):
        N, T, H = h.shape
        if T < 2:
            warnings.warn("std over a length-1 series is undefined; using 0", RuntimeWarning, stacklevel=2)
        mean = h.mean(dim=1)
        var = ((h - mean[:, None]) ** 2).mean(dim=1)
        std = var.clamp_min(1e-20).sqrt()
        mx = h.amax(dim=1)
        a = self.attention_weights(h)
        att = (h * a).sum(dim=1)
        centroid, peaks = self.spectral(h)
        return torch.cat([mean, std, mx, att, centroid, peaks], dim=-1)

    def attention_weights(self, h):
        return torch.softmax(self.attn(h), dim=1)

    def spectral(self, h):
        T = h.shape[1]
        psd = torch.fft.rfft(h, dim=1).abs() ** 2 / T  # (N, T_f, H)
        freqs = torch.arange(psd.shape[1], dtype=h.dtype)
        centroid = (psd * freqs[None, :, None]).sum(dim=1) / psd.sum(dim=1).clamp_min(1e-30)
        avg = psd.mean(dim=2)
        k = min(self.n_peaks, avg.shape[1])
        peaks = torch.topk(avg, k, dim=1).values
        if k < self.n_peaks:
            peaks = F.pad(peaks, (0, self.n_peaks - k))
        return centroid, torch.log1p(peaks)


def score(h, bank_rows, tau):
    """Temperature-scaled cosine logits between latents and bank rows."""
    return F.normalize(h, dim=-1) @ F.normalize(bank_rows, dim=-1).T / tau


@dataclass
class EnvInferOutput:
    h: torch.Tensor
    s: torch.Tensor
    w: torch.Tensor


class EnvInfer(nn.Module):
    """q_phi: (x, c) -> latent h, bank logits s, posterior weights w."""

    def __init__(self, d_in, H, n_peaks=4, tau=0.1, kernel_size=3, dilations=(1, 2, 4)):
        super().__init__()
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        self.tau = tau
        self.tcn = TCN(d_in, H, kernel_size, dilations)
        self.features = TemporalFeatures(H, n_peaks)
        self.norm = nn.LayerNorm(self.features.out_dim)
        self.mlp = nn.Sequential(nn.Linear(self.features.out_dim, H), nn.SiLU(), nn.Linear(H, H))
        self.calls = 0

    def encode(self, x, c):
        if x.shape[:2] != c.shape[:2]:
            raise ValueError(f"x and c must share (N, T); got {tuple(x.shape)} and {tuple(c.shape)}")
        return self.tcn(torch.cat([x, c], dim=-1))

    def latent(self, x, c):
        return torch.tanh(self.mlp(self.norm(self.features(self.encode(x, c)))))

    def forward(self, x, c, bank, tau=None):
        self.calls += 1
        if bank.E.shape[0] == 0:
            raise ValueError("environment bank is empty")
        h = self.latent(x, c)
        s = score(h, bank.E, self.tau if tau is None else tau)
        return EnvInferOutput(h=h, s=s, w=torch.softmax(s, dim=-1))


@dataclass(frozen=True)
class SinkhornConfig:
    reg: float = 0.05
    iters: int = 3

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("sinkhorn iters must be >= 1")
        if not self.reg > 0:
            raise ValueError("sinkhorn reg must be positive")


@torch.no_grad()
def sinkhorn_targets(s, tau, cfg=SinkhornConfig()):
    """Balanced soft assignments from logits ``s`` (N, K).

    Uses the pre-temperature cosine geometry ``s * tau`` scaled by
    ``1 / reg``. Rows of the result sum to 1 and columns to N / K.
    """
    if not torch.isfinite(s).all():
        raise NumericalError("sinkhorn received non-finite logits")
    N, K = s.shape
    if N < 1:
        raise ValueError("sinkhorn needs at least one sample")
    logits = s.detach() * tau / cfg.reg
    Q = torch.exp(logits - logits.max())
    Q = Q / Q.sum()
    for _ in range(cfg.iters):
        Q = Q / Q.sum(dim=0, keepdim=True) / K
        Q = Q / Q.sum(dim=1, keepdim=True) / N
    return Q * N


def cross_entropy(target, logits):
    """Mean over samples of -sum_k target_k log softmax(logits)_k."""
    return -(target * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def swapped_loss_from_logits(s1, s2, tau, cfg=SinkhornConfig()):
    if s1.shape[0] == 1:
        warnings.warn("swapped loss with batch size 1: balanced targets are degenerate", RuntimeWarning, stacklevel=2)
    t1 = sinkhorn_targets(s1, tau, cfg)
    t2 = sinkhorn_targets(s2, tau, cfg)
    return cross_entropy(t2, s1) + cross_entropy(t1, s2)


def swapped_loss(envinfer, view1, view2, bank, cfg=SinkhornConfig()):
    """Each view predicts the other's balanced assignment."""
    o1 = envinfer(*view1, bank)
    o2 = envinfer(*view2, bank)
    return swapped_loss_from_logits(o1.s, o2.s, envinfer.tau, cfg)


def orthogonality_loss(bank_rows):
    En = F.normalize(bank_rows, dim=-1)
    gram = En @ En.T
    eye = torch.eye(gram.shape[0], dtype=gram.dtype)
    return ((gram - eye) ** 2).sum()


@dataclass(frozen=True)
class Augmenter:
    """Two-view synchronized augmentation of (x, c) batches.

    Gaussian jitter (``jitter`` times the per-channel train std), a shared
    per-sample magnitude scale, and a shared circular time shift of up to
    ``max_shift_frac * T`` steps either way. Only continuous channels are
    jittered and scaled.
    """

    jitter: float = 0.05
    scale_range: tuple = (0.9, 1.1)
    max_shift_frac: float = 0.125

    def __call__(self, x, c, generator, x_std=None, c_std=None, c_mask=None):
        N, T, _ = x.shape
        lo, hi = self.scale_range
        scale = lo + (hi - lo) * torch.rand(N, 1, 1, generator=generator, dtype=x.dtype)
        max_shift = int(math.floor(self.max_shift_frac * T))
        shifts = torch.randint(-max_shift, max_shift + 1, (N,), generator=generator)
        x_std = torch.ones(x.shape[-1], dtype=x.dtype) if x_std is None else x_std
        c_std = torch.ones(c.shape[-1], dtype=c.dtype) if c_std is None else c_std
        c_mask = torch.ones(c.shape[-1], dtype=torch.bool) if c_mask is None else c_mask
        xn = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        cn = torch.randn(c.shape, generator=generator, dtype=c.dtype)
        xv = x * scale + self.jitter * x_std * xn
        cm = c_mask.to(c.dtype)
        cv = c * (cm * scale + (1 - cm)) + self.jitter * c_std * cm * cn
        return circular_shift(xv, shifts), circular_shift(cv, shifts)


def circular_shift(x, shifts):
    """Roll each sample of (N, T, C) along time by its own integer shift."""
    N, T, _ = x.shape
    shifts = torch.as_tensor(shifts).reshape(-1).expand(N)
    idx = (torch.arange(T)[None, :] - shifts[:, None]) % T
    return torch.gather(x, 1, idx[:, :, None].expand(-1, -1, x.shape[-1]))
