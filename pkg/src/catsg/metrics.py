"""Distribution distances between real and generated series."""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import pdist
from torch import nn

from . import kernels
from .bundle import Normalizer
from .diffusion import _vocab_sizes
from .errors import NumericalError
from .layers import TCN, ContextEncoder


@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 50
    eps: float = 1e-8

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if not self.eps > 0:
            raise ValueError("smoothing eps must be positive")


def _channels(a):
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty sample set")
    return a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a[:, None]


def histograms(real, gen, spec=HistogramSpec()):
    """Per-channel counts on a grid fixed by the real set's range.

    ``spec.bins`` equal-width bins cover [min, max] of the real values; two
    extra bins collect generated values below and above that range.
    Returns (h_real, h_gen), each (channels, bins + 2).
    """
    r, g = _channels(real), _channels(gen)
    if r.shape[1] != g.shape[1]:
        raise ValueError(f"channel mismatch: {r.shape[1]} vs {g.shape[1]}")
    hr = np.zeros((r.shape[1], spec.bins + 2))
    hg = np.zeros_like(hr)
    for j in range(r.shape[1]):
        lo, hi = r[:, j].min(), r[:, j].max()
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, spec.bins + 1)
        hr[j] = _bin_counts(r[:, j], edges)
        hg[j] = _bin_counts(g[:, j], edges)
    return hr, hg


def _bin_counts(v, edges):
    idx = np.searchsorted(edges, v, side="right")
    idx[v == edges[-1]] = len(edges) - 1  # right edge closes the last interior bin
    return np.bincount(idx, minlength=len(edges) + 1).astype(np.float64)


def mdd(real, gen, spec=HistogramSpec()):
    """Mean over channels of the total-variation distance between marginals."""
    hr, hg = histograms(real, gen, spec)
    p = hr / hr.sum(axis=1, keepdims=True)
    q = hg / hg.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(p - q).sum(axis=1)))


def kl_discrete(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl(real, gen, spec=HistogramSpec()):
    """Mean over channels of KL(p_real || p_gen) on smoothed histograms."""
    hr, hg = histograms(real, gen, spec)
    hr, hg = hr + spec.eps, hg + spec.eps
    p = hr / hr.sum(axis=1, keepdims=True)
    q = hg / hg.sum(axis=1, keepdims=True)
    return float(np.mean([kl_discrete(pi, qi) for pi, qi in zip(p, q)]))


def median_bandwidth(a, b, max_rows=2000):
    pooled = np.concatenate([a, b])
    if pooled.shape[0] > max_rows:
        idx = np.linspace(0, pooled.shape[0] - 1, max_rows).round().astype(int)
        pooled = pooled[idx]
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd(real, gen, bandwidth="median", backend=None):
    """Biased (V-statistic) squared MMD with an RBF kernel.

    ``bandwidth`` is "median" (pooled pairwise-distance heuristic) or a
    fixed positive sigma. Samples are flattened to T * D vectors.
    """
    a = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    b = np.asarray(gen, dtype=np.float64).reshape(len(gen), -1)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("MMD needs at least 2 samples per side")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample widths differ")
    if bandwidth == "median":
        sigma = median_bandwidth(a, b)
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise ValueError("bandwidth must be positive")
    kxx = kernels.rbf_kernel_mean(a, a, sigma, backend)
    kyy = kernels.rbf_kernel_mean(b, b, sigma, backend)
    kxy = kernels.rbf_kernel_mean(a, b, sigma, backend)
    return kxx + kyy - 2.0 * kxy


@dataclass
class GaussianSummary:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_samples(cls, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 2:
            raise ValueError("need an (n >= 2, d) sample matrix")
        return cls(z.mean(axis=0), psd_clip(np.cov(z, rowvar=False)))


def psd_clip(m):
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def _sqrtm_psd(m, tol=1e-8):
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T, np.clip(vals, 0.0, None)


def frechet(g_real, g_gen):
    """Squared Frechet distance between two Gaussians."""
    mu_r, mu_g = np.atleast_1d(g_real.mu), np.atleast_1d(g_gen.mu)
    s_r, s_g = np.atleast_2d(g_real.sigma), np.atleast_2d(g_gen.sigma)
    if mu_r.shape != mu_g.shape or s_r.shape != s_g.shape:
        raise ValueError("Gaussian summaries have different dimensions")
    root_r, _ = _sqrtm_psd(s_r)
    _, vals = _sqrtm_psd(root_r @ s_g @ root_r)
    diff = mu_r - mu_g
    d = float(diff @ diff + np.trace(s_r) + np.trace(s_g) - 2.0 * np.sqrt(vals).sum())
    return max(d, 0.0)


class _SeriesEncoder(nn.Module):
    def __init__(self, c_in, d_e, width=32):
        super().__init__()
        self.tcn = TCN(c_in, width)
        self.proj = nn.Linear(2 * width, d_e)

    def forward(self, x):
        h = self.tcn(x)
        return self.proj(torch.cat([h.mean(dim=1), h.amax(dim=1)], dim=-1))


class EmbedderPair(nn.Module):
    """phi_time over target series and phi_meta over contexts."""

    def __init__(self, meta, d_e=32, width=32, seed=0):
        super().__init__()
        self.meta = dict(meta)
        self.d_e = d_e
        D = int(meta["D"])
        with torch.random.fork_rng():
            torch.manual_seed(int(seed))
            self.ctx = ContextEncoder(meta["channel_kinds"][D:], _vocab_sizes(meta), 4)
            self.phi_time = _SeriesEncoder(D, d_e, width)
            self.phi_meta = _SeriesEncoder(self.ctx.out_dim, d_e, width)
        self.normalizer = Normalizer(meta)

    def tensors(self, x, c):
        return (torch.from_numpy(self.normalizer.x(x)), torch.from_numpy(self.normalizer.c(c)))

    def forward(self, x, c):
        return self.phi_time(x), self.phi_meta(self.ctx(c))

    @torch.no_grad()
    def embed(self, x, c, batch=512):
        """Raw joint embeddings z = [phi_time(x), phi_meta(c)] in float64."""
        out = []
        for i in range(0, len(x), batch):
            xt, ct = self.tensors(x[i:i + batch], c[i:i + batch])
            zt, zm = self(xt, ct)
            out.append(torch.cat([zt, zm], dim=-1).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, 2 * self.d_e))


def info_nce(zt, zm, temperature=0.1):
    """Symmetric contrastive loss on l2-normalized embeddings."""
    zt, zm = F.normalize(zt, dim=-1), F.normalize(zm, dim=-1)
    logits = zt @ zm.T / temperature
    labels = torch.arange(zt.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def train_embedders(x, c, meta, d_e=32, steps=300, batch_size=64, lr=1e-3, temperature=0.1, seed=0):
    """Fit an EmbedderPair on real (x, c) pairs (physical units)."""
    x, c = np.asarray(x), np.asarray(c)
    if x.shape[0] < 2 or min(batch_size, x.shape[0]) < 2:
        raise ValueError("contrastive training needs batches of at least 2 pairs")
    emb = EmbedderPair(meta, d_e=d_e, seed=seed)
    xt, ct = emb.tensors(x, c)
    gen = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.Adam(emb.parameters(), lr=lr)
    n = xt.shape[0]
    bs = min(batch_size, n)
    emb.losses = []
    for _ in range(steps):
        idx = torch.randperm(n, generator=gen)[:bs]
        loss = info_nce(*emb(xt[idx], ct[idx]), temperature)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        emb.losses.append(float(loss.detach()))
    emb.eval()
    return emb


def jftsd(real_x, real_c, gen_x, gen_c, embedders):
    z_r = embedders.embed(np.asarray(real_x), np.asarray(real_c))
    z_g = embedders.embed(np.asarray(gen_x), np.asarray(gen_c))
    return frechet(GaussianSummary.from_samples(z_r), GaussianSummary.from_samples(z_g))


def matched_similarity(embedders, x, c):
    """(mean matched cosine, mean mismatched cosine) of the two embeddings."""
    z = torch.from_numpy(embedders.embed(x, c))
    zt, zm = F.normalize(z[:, :embedders.d_e], dim=-1), F.normalize(z[:, embedders.d_e:], dim=-1)
    sim = zt @ zm.T
    n = sim.shape[0]
    matched = float(sim.diag().mean())
    mismatched = float((sim.sum() - sim.diag().sum()) / (n * n - n))
    return matched, mismatched


METRICS = ("mdd", "kl", "mmd", "jftsd")


def evaluate(real_x, real_c, gen_x, gen_c, metrics=METRICS, embedders=None, hist=HistogramSpec(),
             bandwidth="median"):
    """{metric: {value, config, n_real, n_gen}}."""
    report = {}
    for name in metrics:
        if name == "mdd":
            value, cfg = mdd(real_x, gen_x, hist), {"bins": hist.bins}
        elif name == "kl":
            value, cfg = kl(real_x, gen_x, hist), {"bins": hist.bins, "eps": hist.eps}
        elif name == "mmd":
            value, cfg = mmd(real_x, gen_x, bandwidth), {"bandwidth": bandwidth, "kernel": "rbf"}
        elif name == "jftsd":
            if embedders is None:
                raise ValueError("jftsd needs trained embedders")
            value, cfg = jftsd(real_x, real_c, gen_x, gen_c, embedders), {"d_e": embedders.d_e}
        else:
            raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")
        if not math.isfinite(value):
            raise NumericalError(f"{name} is not finite")
        report[name] = {"value": value, "config": cfg, "n_real": int(len(real_x)), "n_gen": int(len(gen_x))}
    return report
