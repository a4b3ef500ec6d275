"""Convolutional silhouette encoder shared (with independent weights) by the
appearance and projection branches: 64x64 masks -> 128 x 16 x 16 maps."""

from __future__ import annotations

import torch
import torch.nn as nn

INPUT_SIZE = 64
FEATURE_SIZE = 16
FEATURE_CHANNELS = 128


class SilhouetteEncoder(nn.Module):
    """Three stages of paired 3x3 convolutions (32 -> 64 -> 128 channels) with
    2x downsampling after the first two stages."""

    def __init__(self, bias: bool = True):
        super().__init__()

        def stage(c_in, c_out, pool):
            layers = [
                nn.Conv2d(c_in, c_out, 3, padding=1, bias=bias),
                nn.ReLU(inplace=True),
                nn.Conv2d(c_out, c_out, 3, padding=1, bias=bias),
                nn.ReLU(inplace=True),
            ]
            if pool:
                layers.append(nn.MaxPool2d(2))
            return nn.Sequential(*layers)

        self.stages = nn.Sequential(
            stage(1, 32, pool=True),
            stage(32, 64, pool=True),
            stage(64, FEATURE_CHANNELS, pool=False),
        )

    def forward(self, sils: torch.Tensor) -> torch.Tensor:
        """(..., 64, 64) masks in [0, 1] -> (..., 128, 16, 16) feature maps."""
        if sils.shape[-2:] != (INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"expected {INPUT_SIZE}x{INPUT_SIZE} input, got {tuple(sils.shape[-2:])}")
        if not torch.all(torch.isfinite(sils)):
            raise ValueError("silhouette input must be finite")
        if sils.numel() and (sils.min() < -1e-6 or sils.max() > 1.0 + 1e-6):
            raise ValueError("silhouette input must lie in [0, 1]")
        lead = sils.shape[:-2]
        x = sils.reshape(-1, 1, INPUT_SIZE, INPUT_SIZE)
        maps = self.stages(x)
        return maps.reshape(*lead, FEATURE_CHANNELS, FEATURE_SIZE, FEATURE_SIZE)
