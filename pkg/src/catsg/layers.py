"""Shared torch building blocks."""

import math

import torch
import torch.nn.functional as F
from torch import nn


class ContextEncoder(nn.Module):
    """Maps bundle-space contexts to dense model channels.

    Continuous and phase channels pass through (already normalized);
    categorical channels hold vocabulary indices and are embedded.
    """

    def __init__(self, kinds, vocab_sizes=None, emb_dim=4):
        super().__init__()
        self.kinds = list(kinds)
        vocab_sizes = vocab_sizes or {}
        self.cat_idx = [i for i, k in enumerate(self.kinds) if k == "categorical"]
        self.num_idx = [i for i, k in enumerate(self.kinds) if k != "categorical"]
        self.embeds = nn.ModuleList(
            nn.Embedding(int(vocab_sizes[str(i)]) + 1, emb_dim) for i in self.cat_idx
        )
        self.out_dim = len(self.num_idx) + emb_dim * len(self.cat_idx)

    def forward(self, c):
        if not self.cat_idx:
            return c
        parts = [c[..., self.num_idx]]
        for j, emb in zip(self.cat_idx, self.embeds):
            idx = c[..., j].round().long().clamp(0, emb.num_embeddings - 1)
            parts.append(emb(idx).to(c.dtype))
        return torch.cat(parts, dim=-1)

    def continuous_mask(self):
        """Boolean mask over raw context channels that are continuous."""
        return torch.tensor([k == "continuous" for k in self.kinds], dtype=torch.bool)


class CausalConv1d(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, dilation=1):
        super().__init__()
        self.pad = (kernel_size - 1) * dilation
        self.conv = nn.Conv1d(c_in, c_out, kernel_size, dilation=dilation)

    def forward(self, x):
        return self.conv(F.pad(x, (self.pad, 0)))


class TCNBlock(nn.Module):
    def __init__(self, width, kernel_size, dilation):
        super().__init__()
        self.conv1 = CausalConv1d(width, width, kernel_size, dilation)
        self.conv2 = CausalConv1d(width, width, kernel_size, dilation)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class TCN(nn.Module):
    """Dilated causal conv stack. Input and output are (N, T, C)."""

    def __init__(self, c_in, width, kernel_size=3, dilations=(1, 2, 4)):
        super().__init__()
        self.inp = nn.Conv1d(c_in, width, 1)
        self.blocks = nn.ModuleList(TCNBlock(width, kernel_size, d) for d in dilations)
        self.out = nn.Conv1d(width, width, 1)

    def forward(self, x):
        h = self.inp(x.transpose(1, 2))
        for blk in self.blocks:
            h = blk(h)
        return self.out(h).transpose(1, 2)


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of (possibly fractional) diffusion steps."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch):
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ResBlock1d(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet1d(nn.Module):
    """Encoder-bottleneck-decoder over time with skip connections.

    Widths ``(w, 2w, 4w)``, stride-2 resampling, ``n_res`` residual blocks
    per resolution, timestep embedding added inside every block.
    """

    def __init__(self, c_in, c_out, width=32, n_levels=3, n_res=2, t_dim=None):
        super().__init__()
        t_dim = t_dim or 4 * width
        self.t_dim = t_dim
        self.widths = [width * 2**i for i in range(n_levels)]
        self.time_mlp = nn.Sequential(nn.Linear(width, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.stem = nn.Conv1d(c_in, self.widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = self.widths[0]
        for i, w in enumerate(self.widths):
            blocks = nn.ModuleList()
            for _ in range(n_res):
                blocks.append(ResBlock1d(ch, w, t_dim))
                ch = w
            self.down.append(blocks)
            if i < n_levels - 1:
                self.downsample.append(nn.Conv1d(ch, ch, 3, stride=2, padding=1))
        self.mid = nn.ModuleList([ResBlock1d(ch, ch, t_dim) for _ in range(2)])
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(n_levels)):
            w = self.widths[i]
            blocks = nn.ModuleList([ResBlock1d(ch + w, w, t_dim)])
            blocks.extend(ResBlock1d(w, w, t_dim) for _ in range(n_res - 1))
            ch = w
            self.up.append(blocks)
            if i > 0:
                self.upsample.append(nn.Conv1d(ch, self.widths[i - 1], 3, padding=1))
                ch = self.widths[i - 1]
        self.head = nn.Sequential(nn.GroupNorm(_groups(ch), ch), nn.SiLU(), nn.Conv1d(ch, c_out, 3, padding=1))
        self.stride = 2 ** (n_levels - 1)
        self.base_width = width

    def forward(self, x, t):
        """``x`` is (N, C_in, T); ``t`` is (N,) steps. Returns (N, C_out, T)."""
        T = x.shape[-1]
        pad = (-T) % self.stride
        if pad:
            x = F.pad(x, (0, pad), mode="replicate")
        temb = self.time_mlp(timestep_embedding(t, self.base_width).to(x.dtype))
        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down):
            for blk in blocks:
                h = blk(h, temb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        for blk in self.mid:
            h = blk(h, temb)
        for j, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for blk in blocks:
                h = blk(h, temb)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        out = self.head(h)
        return out[..., :T]
