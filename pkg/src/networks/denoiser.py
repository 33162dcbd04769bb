"""Conditional noise predictor: a 3D UNet over the (x_t, low-count) channel pair."""

import torch
import torch.nn as nn

from ..config import NetworkConfig
from ..services.errors import ConfigError
from .layers import Downsample, SelfAttention3d, SinusoidalEmbedding, TimeResBlock, Upsample


def check_divisible(shape: tuple[int, ...], divisor: int) -> None:
    """Spatial dims must survive every halving.

    Raises:
        ConfigError: a spatial dim is not a multiple of divisor
    """
    if any(s % divisor for s in shape):
        raise ConfigError(
            f"patch shape {tuple(shape)} must be divisible by {divisor}", field="patch_size"
        )


class Denoiser(nn.Module):
    """Predicts the injected noise eps from (x_t, i_lc, t).

    `levels` encoder resolutions (levels - 1 downsamplings), levels - 1 decoder
    resolutions back to full size, time embedding added in every residual block,
    self-attention only at the lowest resolution.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.levels = config.denoiser_levels
        widths = [config.base_channels * 2**level for level in range(self.levels)]
        time_dim = config.time_embed_dim

        self.time_embed = SinusoidalEmbedding(time_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )

        self.stem = nn.Conv3d(2, widths[0], kernel_size=3, padding=1)
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(self.levels):
            self.encoders.append(TimeResBlock(widths[level], widths[level], time_dim))
            if level < self.levels - 1:
                self.downs.append(Downsample(widths[level], widths[level + 1]))
        self.attention = SelfAttention3d(widths[-1]) if config.attention_at_lowest else nn.Identity()
        self.mid = TimeResBlock(widths[-1], widths[-1], time_dim)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(self.levels - 2, -1, -1):
            self.ups.append(Upsample(widths[level + 1], widths[level]))
            self.decoders.append(TimeResBlock(2 * widths[level], widths[level], time_dim))
        self.head = nn.Conv3d(widths[0], 1, kernel_size=1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, x_t: torch.Tensor, i_lc: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x_t.shape != i_lc.shape:
            raise ConfigError(f"x_t {tuple(x_t.shape)} and i_lc {tuple(i_lc.shape)} differ")
        check_divisible(tuple(x_t.shape[2:]), self.divisor)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        t_emb = self.time_mlp(self.time_embed(t).to(x_t.dtype))

        h = self.stem(torch.cat([x_t, i_lc], dim=1))
        skips = []
        for level, encoder in enumerate(self.encoders):
            h = encoder(h, t_emb)
            if level < self.levels - 1:
                skips.append(h)
                h = self.downs[level](h)
        h = self.mid(self.attention(h), t_emb)
        for up, decoder in zip(self.ups, self.decoders):
            h = decoder(torch.cat([up(h), skips.pop()], dim=1), t_emb)
        return self.head(h)
