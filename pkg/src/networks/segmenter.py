"""Dual-branch segmenter: one ResMamba encoder, separate lesion and organ decoders.

Head layouts:
    lesion logits: 2 channels (not lesion, lesion)
    organ logits:  S channels; channel 0 is "no organ", channel j >= 1 is class j + 1
"""

import torch
import torch.nn as nn

from ..config import NetworkConfig
from .denoiser import check_divisible
from .layers import ConvBlock, Downsample, Upsample
from .ssm import ResMambaBlock

# Inputs are divided by this before the stem
INPUT_SCALE = 20.0


class Decoder(nn.Module):
    """Upsampling path with encoder skips, ending in a 1x1x1 classifier."""

    def __init__(self, widths: list[int], out_channels: int):
        super().__init__()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for level in range(len(widths) - 1, 0, -1):
            self.ups.append(Upsample(widths[level], widths[level - 1]))
            self.blocks.append(ConvBlock(2 * widths[level - 1], widths[level - 1]))
        self.head = nn.Conv3d(widths[0], out_channels, kernel_size=1)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        h = features[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(features[:-1])):
            h = block(torch.cat([up(h), skip], dim=1))
        return self.head(h)


class Segmenter(nn.Module):
    def __init__(self, config: NetworkConfig, num_classes: int):
        super().__init__()
        self.stages = config.segmenter_stages
        widths = [config.base_channels * 2**level for level in range(self.stages + 1)]
        self.stem = ConvBlock(2, widths[0])
        self.downs = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for stage in range(self.stages):
            self.downs.append(Downsample(widths[stage], widths[stage + 1]))
            self.blocks.append(
                ResMambaBlock(
                    widths[stage + 1],
                    config.ssm_state_dim,
                    chunk=config.ssm_chunk,
                    bidirectional=config.bidirectional_scan,
                )
            )
        self.lesion_decoder = Decoder(widths, 2)
        self.organ_decoder = Decoder(widths, num_classes - 1)

    @property
    def divisor(self) -> int:
        return 2**self.stages

    def encode(self, p_hcr: torch.Tensor, i_lc: torch.Tensor) -> list[torch.Tensor]:
        check_divisible(tuple(p_hcr.shape[2:]), self.divisor)
        h = self.stem(torch.cat([p_hcr, i_lc], dim=1) / INPUT_SCALE)
        features = [h]
        for down, block in zip(self.downs, self.blocks):
            h = block(down(h))
            features.append(h)
        return features

    def forward(self, p_hcr: torch.Tensor, i_lc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (lesion_logits, organ_logits)."""
        features = self.encode(p_hcr, i_lc)
        return self.lesion_decoder(features), self.organ_decoder(features)
