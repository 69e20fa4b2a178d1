"""Shared building blocks: channel attention and Sobel gradients.

The Sobel pass is implemented separably (difference then [1,2,1] smoothing)
so that a constant image produces exactly zero response in floating point;
the direct 3x3 correlation can leave ~1e-8 residue from summation order.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def sobel_gxgy(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal/vertical Sobel responses with replicate border padding.

    x: [..., H, W]. Returns (gx, gy) of the same shape. gx responds to
    left-to-right intensity increase (value 8/W on a ramp x/W), gy to
    top-to-bottom increase.
    """
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError("empty image")
    shape = x.shape
    xp = F.pad(x.reshape(-1, 1, shape[-2], shape[-1]), (1, 1, 1, 1), mode="replicate")
    dx = xp[..., :, 2:] - xp[..., :, :-2]  # [*, 1, H+2, W]
    gx = dx[..., :-2, :] + 2.0 * dx[..., 1:-1, :] + dx[..., 2:, :]
    dy = xp[..., 2:, :] - xp[..., :-2, :]  # [*, 1, H, W+2]
    gy = dy[..., :, :-2] + 2.0 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return gx.reshape(shape), gy.reshape(shape)


def bilinear_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resize [N, C, H, W] to [N, C, *size]; no-op when already there."""
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ChannelAttention(nn.Module):
    """Squeeze-excite gating: pooled descriptor -> bottleneck -> sigmoid gates."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        mid = max(channels // reduction, 4)
        self.fc1 = nn.Conv2d(channels, mid, kernel_size=1)
        self.fc2 = nn.Conv2d(mid, channels, kernel_size=1)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3), keepdim=True)  # [N, C, 1, 1]
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)
