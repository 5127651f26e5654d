"""Small DDPM-style U-Net for epsilon prediction, with tappable block outputs.

Tappable blocks are numbered flat, in forward execution order:
every encoder residual block, the middle block (counted once), then every
decoder residual block.  Downsample/upsample layers and the stem are not taps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class UNetConfig:
    resolution: int = 32
    in_channels: int = 3
    base_width: int = 64
    channel_mults: tuple = (1, 2, 2)
    res_blocks: int = 2
    attention_resolutions: tuple = (16,)
    time_embed_dim: int = 256

    def __post_init__(self):
        levels = len(self.channel_mults)
        if levels < 1:
            raise ValueError("need at least one resolution level")
        if self.resolution % (2 ** (levels - 1)) != 0:
            raise ValueError(
                f"resolution {self.resolution} not divisible by 2^{levels - 1}"
            )
        if self.base_width < 1 or any(m < 1 for m in self.channel_mults):
            raise ValueError("channel widths must be >= 1")
        if self.res_blocks < 1:
            raise ValueError("res_blocks must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def num_taps(self) -> int:
        return 2 * self.levels * self.res_blocks + 1

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "in_channels": self.in_channels,
            "base_width": self.base_width,
            "channel_mults": list(self.channel_mults),
            "res_blocks": self.res_blocks,
            "attention_resolutions": list(self.attention_resolutions),
            "time_embed_dim": self.time_embed_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        return UNetConfig(
            resolution=int(d["resolution"]),
            in_channels=int(d["in_channels"]),
            base_width=int(d["base_width"]),
            channel_mults=tuple(d["channel_mults"]),
            res_blocks=int(d["res_blocks"]),
            attention_resolutions=tuple(d["attention_resolutions"]),
            time_embed_dim=int(d["time_embed_dim"]),
        )


def _group_norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    raise AssertionError("unreachable")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / max(half - 1, 1)
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = _group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    """Single-head spatial self-attention with residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _group_norm(channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        hn = self.norm(x)
        q = self.q(hn).reshape(b, c, h * w).permute(0, 2, 1)
        k = self.k(hn).reshape(b, c, h * w)
        v = self.v(hn).reshape(b, c, h * w).permute(0, 2, 1)
        attn = torch.softmax(torch.bmm(q, k) / math.sqrt(c), dim=-1)
        out = torch.bmm(attn, v).permute(0, 2, 1).reshape(b, c, h, w)
        return x + self.proj(out)


class BlockUnit(nn.Module):
    """One tappable unit: a residual block, optionally followed by attention."""

    def __init__(self, in_ch, out_ch, temb_dim, with_attn):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim)
        self.attn = AttnBlock(out_ch) if with_attn else None

    def forward(self, x, temb):
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h)
        return h


class UNet(nn.Module):
    """Epsilon-prediction network.  forward(x, t, tap=b) stops at block b."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        tdim = cfg.time_embed_dim
        self.temb = nn.Sequential(
            nn.Linear(cfg.base_width, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        widths = [cfg.base_width * m for m in cfg.channel_mults]
        self.stem = nn.Conv2d(cfg.in_channels, cfg.base_width, 3, padding=1)

        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        skip_chs = []
        ch = cfg.base_width
        res = cfg.resolution
        for lvl, w in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(
                    BlockUnit(ch, w, tdim, res in cfg.attention_resolutions)
                )
                ch = w
                skip_chs.append(ch)
            self.enc.append(blocks)
            if lvl < cfg.levels - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                res //= 2

        self.mid = BlockUnit(ch, ch, tdim, True)

        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            w = widths[lvl]
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(
                    BlockUnit(ch + skip_chs.pop(), w, tdim, res in cfg.attention_resolutions)
                )
                ch = w
            self.dec.append(blocks)
            if lvl > 0:
                self.up.append(nn.Conv2d(ch, ch, 3, padding=1))
                res *= 2

        self.out_norm = _group_norm(ch)
        self.out_conv = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def forward(self, x, t, tap: int | None = None, collect: bool = False):
        """Run the network.

        tap=b returns block b's output and skips the rest; collect=True
        returns the list of every tappable block output (probe mode).
        """
        cfg = self.cfg
        if x.shape[-1] != cfg.resolution or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"input shape {tuple(x.shape)} does not match config "
                f"({cfg.in_channels}, {cfg.resolution}, {cfg.resolution})"
            )
        if tap is not None and not 0 <= tap < cfg.num_taps:
            raise IndexError(f"tap {tap} outside 0..{cfg.num_taps - 1}")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t), dtype=x.dtype, device=x.device)
        temb = self.temb(timestep_embedding(t.to(x.dtype), cfg.base_width))

        taps = []

        def emit(h):
            taps.append(h if collect else None)
            if collect:
                return None
            if tap is not None and len(taps) - 1 == tap:
                return h
            return None

        h = self.stem(x)
        skips = []
        for lvl, blocks in enumerate(self.enc):
            for blk in blocks:
                h = blk(h, temb)
                skips.append(h)
                out = emit(h)
                if out is not None:
                    return out
            if lvl < cfg.levels - 1:
                h = self.down[lvl](h)

        h = self.mid(h, temb)
        out = emit(h)
        if out is not None:
            return out

        for i, blocks in enumerate(self.dec):
            for blk in blocks:
                h = blk(torch.cat([h, skips.pop()], dim=1), temb)
                out = emit(h)
                if out is not None:
                    return out
            if i < cfg.levels - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.up[i](h)

        eps_pred = self.out_conv(F.silu(self.out_norm(h)))
        if collect:
            return taps
        return eps_pred
