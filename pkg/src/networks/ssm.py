"""Diagonal state-space scan and the ResMamba encoder block.

The scan runs over the flattened voxel sequence (x fastest) of every channel:

    h_k = a * h_{k-1} + b * x_k,   h_0 = 0
    y_k = sum_n c_n * h_k[n] + d * x_k

with N independent diagonal states per channel. It is evaluated in chunks: inside
a chunk the recurrence is a lower-triangular matrix of powers of a, and only
the last state is carried sequentially from chunk to chunk.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..services.errors import ParameterizationError
from .layers import ConvBlock, group_norm


@dataclass
class SsmParams:
    """Per-channel scan coefficients: a, b, c of shape (C, N), d of shape (C,)."""

    a: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    d: torch.Tensor

    def __post_init__(self) -> None:
        if self.a.shape != self.b.shape or self.a.shape != self.c.shape or self.a.ndim != 2:
            raise ParameterizationError("a, b and c must share shape (C, N)")
        if self.d.shape != self.a.shape[:1]:
            raise ParameterizationError("d must have shape (C,)")
        if bool((self.a.detach().abs() >= 1).any()):
            raise ParameterizationError("unstable scan: |a| must stay below 1", field="a")


def _powers(a: torch.Tensor, length: int) -> torch.Tensor:
    """a^0 .. a^length along a new last axis, by running product."""
    ones = torch.ones((*a.shape, 1), dtype=a.dtype, device=a.device)
    if length == 0:
        return ones
    return torch.cat([ones, torch.cumprod(a.unsqueeze(-1).expand(*a.shape, length), dim=-1)], dim=-1)


def ssm_scan(x: torch.Tensor, params: SsmParams, chunk: int = 64) -> torch.Tensor:
    """Run the diagonal scan over x of shape (B, C, L).

    Args:
        x: input sequences
        params: scan coefficients
        chunk: block length of the closed-form intra-chunk kernel

    Returns:
        y with the shape of x
    """
    batch, channels, length = x.shape
    if params.a.shape[0] != channels:
        raise ParameterizationError(f"params hold {params.a.shape[0]} channels, input {channels}")
    chunk = max(1, min(int(chunk), length))
    a, b, c = params.a, params.b, params.c

    powers = _powers(a, chunk)  # (C, N, chunk + 1)
    steps = torch.arange(chunk, device=x.device)
    lag = steps[:, None] - steps[None, :]
    causal = lag >= 0
    # kernel[c, n, k, j] = a^(k - j) for j <= k
    kernel = powers[..., lag.clamp(min=0)] * causal.to(x.dtype)

    state = torch.zeros((batch, *a.shape), dtype=x.dtype, device=x.device)
    outputs = []
    for start in range(0, length, chunk):
        xs = x[:, :, start : start + chunk]
        k = xs.shape[-1]
        u = b[None, :, :, None] * xs[:, :, None, :]  # (B, C, N, k)
        h = torch.einsum("cnkj,bcnj->bcnk", kernel[..., :k, :k], u)
        h = h + powers[None, :, :, 1 : k + 1] * state[..., None]
        state = h[..., -1]
        outputs.append(torch.einsum("cn,bcnk->bck", c, h))
    y = torch.cat(outputs, dim=-1)
    return y + params.d[None, :, None] * x


# tanh saturates to 1.0 in float32, so decays are scaled strictly inside (-1, 1)
DECAY_BOUND = 0.999


class DiagonalSSM(nn.Module):
    """Learnable scan coefficients; a = DECAY_BOUND * tanh(a_raw) keeps the scan stable."""

    def __init__(self, channels: int, state_dim: int, chunk: int = 64, bidirectional: bool = False):
        super().__init__()
        self.chunk = chunk
        self.bidirectional = bidirectional
        # decays start near 0.5
        self.a_raw = nn.Parameter(torch.atanh(torch.tensor(0.5 / DECAY_BOUND)) + 0.1 * torch.randn(channels, state_dim))
        self.b = nn.Parameter(torch.ones(channels, state_dim))
        self.c = nn.Parameter(torch.randn(channels, state_dim) / state_dim**0.5)
        self.d = nn.Parameter(torch.ones(channels))

    def params(self) -> SsmParams:
        return SsmParams(a=DECAY_BOUND * torch.tanh(self.a_raw), b=self.b, c=self.c, d=self.d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        params = self.params()
        y = ssm_scan(x, params, self.chunk)
        if self.bidirectional:
            y = 0.5 * (y + ssm_scan(x.flip(-1), params, self.chunk).flip(-1))
        return y


class ResMambaBlock(nn.Module):
    """Conv block, channel gate, spatial gate, then a scan over the flattened volume.

    A residual connection spans the whole block.
    """

    def __init__(
        self,
        channels: int,
        state_dim: int,
        chunk: int = 64,
        bidirectional: bool = False,
        reduction: int = 4,
    ):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.conv = ConvBlock(channels, channels)
        self.channel_gate = nn.Sequential(
            nn.AdaptiveAvgPool3d(1),
            nn.Conv3d(channels, hidden, kernel_size=1),
            nn.SiLU(),
            nn.Conv3d(hidden, channels, kernel_size=1),
            nn.Sigmoid(),
        )
        self.spatial_gate = nn.Conv3d(channels, 1, kernel_size=1)
        self.norm = group_norm(channels)
        self.ssm = DiagonalSSM(channels, state_dim, chunk, bidirectional)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x)
        h = h * self.channel_gate(h)
        h = h * torch.sigmoid(self.spatial_gate(h))
        h = self.norm(h)
        # (B, C, D, H, W) flattens with W (= x) fastest
        seq = self.ssm(h.flatten(2))
        return x + F.silu(seq.reshape(h.shape))
