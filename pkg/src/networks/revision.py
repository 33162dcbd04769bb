"""Revision module: lifts the clamped diffusion output back to full-range SUV.

    p_hcr = i_lc + convs([unmap(p_hc) * i_lc, unmap(p_hc), i_lc] / scale)

The skip to i_lc restores values above the diffusion cutoff; the last conv starts
at zero so an untrained module passes the low-count input through unchanged.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..services.diffusion import DiffusionNorm
from ..services.errors import GeometryError
from .layers import group_norm


class Revision(nn.Module):
    """Residual SUV-range correction of the low-count input, identity at init.

    Input channels are unmap(p_hc) * i_lc, unmap(p_hc) and i_lc, scaled by the
    SUV cutoff c. Channel 0 alone is the single-channel product input up to 1/c^2.
    """

    def __init__(self, channels: int, suv_cutoff: float = 20.0):
        super().__init__()
        self.norm_map = DiffusionNorm(suv_cutoff)
        self.conv1 = nn.Conv3d(3, channels, kernel_size=3, padding=1)
        self.norm1 = group_norm(channels)
        self.conv2 = nn.Conv3d(channels, channels, kernel_size=3, padding=1)
        self.norm2 = group_norm(channels)
        self.conv3 = nn.Conv3d(channels, 1, kernel_size=3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, p_hc: torch.Tensor, i_lc: torch.Tensor) -> torch.Tensor:
        """p_hc in diffusion space, i_lc in SUV; returns SUV."""
        if p_hc.shape != i_lc.shape:
            raise GeometryError(f"p_hc {tuple(p_hc.shape)} and i_lc {tuple(i_lc.shape)} differ")
        cutoff = self.norm_map.suv_cutoff
        suv = self.norm_map.to_suv(p_hc)
        features = torch.cat([suv * i_lc / cutoff**2, suv / cutoff, i_lc / cutoff], dim=1)
        h = F.silu(self.norm1(self.conv1(features)))
        h = F.silu(self.norm2(self.conv2(h)))
        return i_lc + self.conv3(h)
