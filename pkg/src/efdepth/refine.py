"""Recurrent decoding and confidence-normalized spatial propagation.

The fused feature is decoded back toward input resolution with skip
connections, threaded through a convolutional GRU so depth evidence
persists across the sequence, and read out by three heads: a coarse
log-depth map, per-pixel non-local affinities with learned neighbor
offsets, and a mask-informed confidence map. Affinities are normalized so
their per-pixel absolute sum stays below the confidence (itself <= 1),
which makes the iterative propagation a stable averaging process.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .layers import ChannelAttention, bilinear_resize


class ConvGRU(nn.Module):
    """Convolutional gated recurrence; the new state doubles as the output."""

    def __init__(self, in_channels: int, state_channels: int):
        super().__init__()
        self.state_channels = state_channels
        cat_ch = in_channels + state_channels
        self.conv_z = nn.Conv2d(cat_ch, state_channels, kernel_size=3, padding=1)
        self.conv_r = nn.Conv2d(cat_ch, state_channels, kernel_size=3, padding=1)
        self.conv_h = nn.Conv2d(cat_ch, state_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, state: Optional[torch.Tensor]) -> torch.Tensor:
        if state is None:
            n, _, h, w = x.shape
            state = x.new_zeros(n, self.state_channels, h, w)
        if state.shape[-2:] != x.shape[-2:]:
            raise ValueError(
                f"state spatial shape {tuple(state.shape[-2:])} drifted from "
                f"input {tuple(x.shape[-2:])}"
            )
        xs = torch.cat([x, state], dim=1)
        z = torch.sigmoid(self.conv_z(xs))
        r = torch.sigmoid(self.conv_r(xs))
        h_cand = torch.tanh(self.conv_h(torch.cat([x, r * state], dim=1)))
        return (1.0 - z) * state + z * h_cand


class CoarseDepthHead(nn.Module):
    """Convolution + sigmoid, bilinearly upsampled to the output size."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, kernel_size=3, padding=1)

    def forward(self, features: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        return bilinear_resize(torch.sigmoid(self.conv(features)), out_size)


class AffinityHead(nn.Module):
    """Raw affinities and tanh-bounded neighbor offsets, per pixel.

    Zero-initialized so propagation starts as the identity and the offsets
    grow from the pixel itself outward during training.
    """

    def __init__(self, in_channels: int, neighbors: int = 8, radius: float = 6.0):
        super().__init__()
        if neighbors < 1:
            raise ConfigError(f"need at least one neighbor, got {neighbors}")
        if radius <= 0:
            raise ConfigError(f"offset radius must be positive, got {radius}")
        self.neighbors = neighbors
        self.radius = float(radius)
        self.conv = nn.Conv2d(in_channels, 3 * neighbors, kernel_size=3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, features, out_size) -> tuple[torch.Tensor, torch.Tensor]:
        raw = bilinear_resize(self.conv(features), out_size)
        n, _, h, w = raw.shape
        k = self.neighbors
        affinity = raw[:, :k]  # [N, K, H, W], unbounded
        offsets = self.radius * torch.tanh(raw[:, k:].reshape(n, k, 2, h, w))
        return affinity, offsets


class ConfidenceHead(nn.Module):
    """Fuse temporal features with the stacked consensus masks into c in (0,1)."""

    def __init__(self, in_channels: int, mask_channels: int):
        super().__init__()
        cat_ch = in_channels + mask_channels
        self.attention = ChannelAttention(cat_ch)
        self.conv = nn.Conv2d(cat_ch, 1, kernel_size=1)

    def forward(self, features, m_stack, out_size) -> torch.Tensor:
        masks = bilinear_resize(m_stack, features.shape[-2:])
        x = torch.cat([features, masks], dim=1)
        c = torch.sigmoid(self.conv(self.attention(x)))
        return bilinear_resize(c, out_size)


def normalize_affinity(raw_affinity, confidence, gamma) -> torch.Tensor:
    """w = confidence * tanh(raw) / gamma, broadcast over the K neighbors.

    With gamma >= K the per-pixel absolute sum is bounded by the confidence,
    hence by 1.
    """
    if not torch.is_tensor(gamma):
        gamma = torch.as_tensor(gamma, dtype=raw_affinity.dtype)
    gamma_value = float(gamma.detach())
    if gamma_value <= 0.0:
        raise ConfigError(f"gamma must be positive, got {gamma_value}")
    return confidence * torch.tanh(raw_affinity) / gamma


def _norm_coord(pos: torch.Tensor, size: int) -> torch.Tensor:
    # align_corners=True convention; a size-1 axis collapses to its center
    if size > 1:
        return 2.0 * pos / (size - 1) - 1.0
    return torch.zeros_like(pos)


def propagate(depth, weights, offsets, iterations: int = 18) -> torch.Tensor:
    """Iteratively diffuse depth toward learned non-local neighbors.

    depth [N,1,H,W]; weights [N,K,H,W] with per-pixel sum(|w|) <= 1;
    offsets [N,K,2,H,W] as (dy, dx). Each iteration replaces every pixel by
    (1 - sum w) * itself + sum_k w_k * depth(pixel + offset_k), sampling
    fractional positions bilinearly and clamping out-of-image positions to
    the border. The per-pixel self-weight complement makes w = 0 the exact
    identity.
    """
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")
    n, k, two, h, w = offsets.shape
    if two != 2 or weights.shape != (n, k, h, w):
        raise ValueError(
            f"offsets {tuple(offsets.shape)} and weights {tuple(weights.shape)} disagree"
        )
    ys = torch.arange(h, dtype=depth.dtype, device=depth.device).reshape(1, 1, h, 1)
    xs = torch.arange(w, dtype=depth.dtype, device=depth.device).reshape(1, 1, 1, w)
    norm_y = _norm_coord(ys + offsets[:, :, 0], h)
    norm_x = _norm_coord(xs + offsets[:, :, 1], w)
    # fold K into the output rows: one grid_sample per iteration
    grid = torch.stack([norm_x, norm_y], dim=-1).reshape(n, k * h, w, 2)
    self_weight = 1.0 - weights.sum(dim=1, keepdim=True)
    out = depth
    for _ in range(iterations):
        sampled = F.grid_sample(
            out, grid, mode="bilinear", padding_mode="border", align_corners=True
        ).reshape(n, k, h, w)
        out = self_weight * out + (weights * sampled).sum(dim=1, keepdim=True)
    return out


class RefineResult(NamedTuple):
    refined: torch.Tensor
    coarse: torch.Tensor
    state: torch.Tensor
    confidence: torch.Tensor
    raw_affinity: torch.Tensor
    offsets: torch.Tensor
    weights: torch.Tensor
    gamma: torch.Tensor


class RecurrentRefiner(nn.Module):
    """Decoder + recurrence + heads + propagation over one timestep.

    The caller threads `state` through the sequence (None at the first
    step). Skip connections carry both modalities' shallow pyramid levels;
    passing skips=None substitutes zeros, which keeps the module usable in
    isolation.
    """

    def __init__(
        self,
        fused_channels: int = 128,
        skip_channels: Sequence[int] = (64, 32),
        decoder_channels: Sequence[int] = (48, 32, 24),
        state_channels: int = 16,
        mask_channels: int = 3,
        neighbors: int = 8,
        offset_radius: float = 6.0,
        iterations: int = 18,
    ):
        super().__init__()
        d3, d2, d1 = decoder_channels
        self.neighbors = neighbors
        self.iterations = iterations
        self.reduce = nn.Conv2d(fused_channels, d3, kernel_size=3, padding=1)
        self.dec2 = nn.Conv2d(d3 + skip_channels[0], d2, kernel_size=3, padding=1)
        self.dec1 = nn.Conv2d(d2 + skip_channels[1], d1, kernel_size=3, padding=1)
        self.skip_channels = tuple(skip_channels)
        self.gru = ConvGRU(d1, state_channels)
        self.coarse_head = CoarseDepthHead(state_channels)
        self.affinity_head = AffinityHead(state_channels, neighbors, offset_radius)
        self.confidence_head = ConfidenceHead(state_channels, mask_channels)
        # gamma = exp(rho) keeps the normalizer positive; start at the
        # neighbor count so the affinity bound holds from the first step
        self.rho = nn.Parameter(torch.tensor(math.log(float(neighbors))))

    @property
    def gamma(self) -> torch.Tensor:
        return self.rho.exp()

    def forward(
        self,
        f_fused: torch.Tensor,
        m_stack: torch.Tensor,
        state: Optional[torch.Tensor] = None,
        skips: Optional[Sequence[torch.Tensor]] = None,
        out_size: Optional[tuple[int, int]] = None,
    ) -> RefineResult:
        n, _, h8, w8 = f_fused.shape
        if out_size is None:
            out_size = (h8 * 8, w8 * 8)
        if skips is None:
            skips = (
                f_fused.new_zeros(n, self.skip_channels[0], h8 * 2, w8 * 2),
                f_fused.new_zeros(n, self.skip_channels[1], h8 * 4, w8 * 4),
            )
        x = F.elu(self.reduce(f_fused))
        x = bilinear_resize(x, skips[0].shape[-2:])
        x = F.elu(self.dec2(torch.cat([x, skips[0]], dim=1)))
        x = bilinear_resize(x, skips[1].shape[-2:])
        x = F.elu(self.dec1(torch.cat([x, skips[1]], dim=1)))

        temporal = self.gru(x, state)
        coarse = self.coarse_head(temporal, out_size)
        raw_affinity, offsets = self.affinity_head(temporal, out_size)
        confidence = self.confidence_head(temporal, m_stack, out_size)
        gamma = self.gamma
        weights = normalize_affinity(raw_affinity, confidence, gamma)
        refined = propagate(coarse, weights, offsets, self.iterations)
        return RefineResult(
            refined=refined,
            coarse=coarse,
            state=temporal,
            confidence=confidence,
            raw_affinity=raw_affinity,
            offsets=offsets,
            weights=weights,
            gamma=gamma,
        )
