"""Per-modality pyramid encoder.

A deliberately small stand-in for a heavy backbone: three stride-2
convolutions with ELU, channels (16, 32, 64). The fusion and refinement
stages only depend on the pyramid interface, so a larger encoder can be
swapped in behind it.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

DEFAULT_CHANNELS = (16, 32, 64)


class PyramidEncoder(nn.Module):
    def __init__(self, in_channels: int, channels=DEFAULT_CHANNELS):
        super().__init__()
        self.channels = tuple(channels)
        convs = []
        prev = in_channels
        for c in self.channels:
            convs.append(nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1))
            prev = c
        self.convs = nn.ModuleList(convs)

    @property
    def levels(self) -> int:
        return len(self.convs)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        # x: [N, C_in, H, W] -> [ [N,16,H/2,W/2], [N,32,H/4,W/4], [N,64,H/8,W/8] ]
        h, w = x.shape[-2:]
        div = 1 << self.levels
        if h % div or w % div:
            raise ConfigError(
                f"input {h}x{w} not divisible by {div}; pad or crop to a multiple"
            )
        feats = []
        out = x
        for conv in self.convs:
            out = F.elu(conv(out))
            feats.append(out)
        return feats
