"""Shared 3D building blocks: normalization, conv blocks, time embedding, attention."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def norm_groups(channels: int, max_groups: int = 8) -> int:
    """Largest group count <= max_groups dividing `channels` with >= 2 channels per group."""
    for groups in range(min(max_groups, max(channels // 2, 1)), 0, -1):
        if channels % groups == 0:
            return groups
    return 1


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(norm_groups(channels), channels)


def conv3(in_channels: int, out_channels: int, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)


class ConvBlock(nn.Module):
    """conv 3x3x3 -> group norm -> SiLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = conv3(in_channels, out_channels, stride)
        self.norm = group_norm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.silu(self.norm(self.conv(x)))


class SinusoidalEmbedding(nn.Module):
    """Sinusoidal embedding of integer timesteps, shape (B,) -> (B, dim)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        scale = math.log(10000.0) / max(half - 1, 1)
        freqs = torch.exp(torch.arange(half, dtype=torch.float64) * -scale)
        args = t.to(torch.float64)[:, None] * freqs[None, :]
        return torch.cat((args.sin(), args.cos()), dim=-1)


class TimeResBlock(nn.Module):
    """Two conv blocks with the time embedding added between them, plus a residual path."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.block1 = ConvBlock(in_channels, out_channels)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.block2 = ConvBlock(out_channels, out_channels)
        self.skip = (
            nn.Conv3d(in_channels, out_channels, kernel_size=1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.block1(x)
        h = h + self.time_proj(t_emb)[:, :, None, None, None]
        h = self.block2(h)
        return h + self.skip(x)


class SelfAttention3d(nn.Module):
    """Single-head full self-attention over all voxels of a feature map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, kernel_size=1)
        self.proj = nn.Conv3d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        q, k, v = self.qkv(self.norm(x)).flatten(2).chunk(3, dim=1)  # (B, C, L) each
        weights = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", weights, v).reshape(x.shape)
        return x + self.proj(out)


class Downsample(nn.Module):
    """Strided conv halving every spatial axis."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = conv3(in_channels, out_channels, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour x2 followed by a conv."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = conv3(in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
