"""Modality-specific reliability masks.

The event mask starts from multi-scale patch densities of the voxel grid
(where did events actually land?), the frame mask from Sobel edge energy
(where does the image carry structure?). Each is mapped by a small 3x3
convolutional head, initialized near-neutral so neither prior dominates
early training. Masks are unconstrained reals here; the fused-mask head
downstream bounds its output instead.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .layers import sobel_gxgy

DEFAULT_PATCHES = (8, 16, 32)


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [B,H,W] or [N,B,H,W], got shape {tuple(x.shape)}")


def patch_density(voxel: torch.Tensor, patch: int) -> torch.Tensor:
    """Normalized per-patch count of nonzero deposits, averaged over bins.

    voxel: [B, H, W] or [N, B, H, W] raw (pre-standardization) deposits.
    Each time bin is split into non-overlapping patch x patch cells; the
    count of nonzero cells per patch is divided by the mean patch count of
    that bin, and the resulting planes are averaged over the bins that
    contain any deposit. Patch values are broadcast to their pixels. A grid
    with no deposits at all yields zeros.
    """
    if patch <= 0:
        raise ConfigError(f"patch size must be positive, got {patch}")
    x, squeeze = _as_batched(voxel)
    n, b, h, w = x.shape
    pad_h = (-h) % patch
    pad_w = (-w) % patch
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    hp, wp = x.shape[-2:]
    nh, nw = hp // patch, wp // patch

    nonzero = (x != 0).to(x.dtype)
    counts = nonzero.reshape(n, b, nh, patch, nw, patch).sum(dim=(3, 5))  # [N,B,nh,nw]
    per_bin_mean = counts.mean(dim=(2, 3), keepdim=True)  # [N,B,1,1]
    populated = per_bin_mean > 0
    normed = torch.where(populated, counts / per_bin_mean.clamp(min=1e-30), torch.zeros_like(counts))
    n_pop = populated.reshape(n, b).sum(dim=1).clamp(min=1)  # [N]
    plane = normed.sum(dim=1) / n_pop.reshape(n, 1, 1).to(x.dtype)  # [N,nh,nw]

    up = plane.repeat_interleave(patch, dim=1).repeat_interleave(patch, dim=2)
    up = up[:, :h, :w]
    return up[0] if squeeze else up


def density_stack(voxel: torch.Tensor, patches=DEFAULT_PATCHES) -> torch.Tensor:
    """Stack patch_density planes for each scale: [S, H, W] or [N, S, H, W]."""
    planes = [patch_density(voxel, p) for p in patches]
    return torch.stack(planes, dim=-3)


def sobel_edges(frame: torch.Tensor) -> torch.Tensor:
    """Edge magnitude |gx| + |gy| of a grayscale image in [0,1].

    The L1 norm keeps a constant image at exactly zero and — unlike the
    Euclidean norm — has a finite subgradient on flat regions, which 8-bit
    quantized frames are full of.
    """
    gx, gy = sobel_gxgy(frame)
    return gx.abs() + gy.abs()


def _init_near_neutral(conv: nn.Conv2d) -> None:
    nn.init.normal_(conv.weight, mean=0.0, std=0.01)
    nn.init.zeros_(conv.bias)


class EventMaskHead(nn.Module):
    """Multi-scale density stack -> 3x3 conv -> single-channel event mask."""

    def __init__(self, patches=DEFAULT_PATCHES):
        super().__init__()
        self.patches = tuple(patches)
        self.conv = nn.Conv2d(len(self.patches), 1, kernel_size=3, padding=1)
        _init_near_neutral(self.conv)

    def forward(self, voxel: torch.Tensor) -> torch.Tensor:
        # voxel: [N, B, H, W] raw deposits -> [N, 1, H, W]
        stack = density_stack(voxel, self.patches)
        return self.conv(stack)


class FrameMaskHead(nn.Module):
    """Sobel edge magnitude -> 3x3 conv -> single-channel frame mask."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, kernel_size=3, padding=1)
        _init_near_neutral(self.conv)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        # frame: [N, 1, H, W] in [0,1] -> [N, 1, H, W]
        return self.conv(sobel_edges(frame))


class MaskDownsampler(nn.Module):
    """Chain of stride-2 3x3 convolutions taking a mask to a pyramid level.

    Initialized as a mean filter so it behaves like average pooling until
    trained; learnable thereafter.
    """

    def __init__(self, levels: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(1, 1, kernel_size=3, stride=2, padding=1) for _ in range(levels)
        )
        for conv in self.convs:
            nn.init.constant_(conv.weight, 1.0 / 9.0)
            nn.init.zeros_(conv.bias)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        out = mask
        for conv in self.convs:
            out = conv(out)
        return out
