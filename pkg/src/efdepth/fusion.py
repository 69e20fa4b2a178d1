"""Consensus fusion of event and frame features under mask guidance.

Each block emphasizes both modalities by their reliability masks, fuses
them through channel attention, derives a bounded fused mask, and (except
in the final block) feeds half of the fused feature back into each branch
while shifting both masks by the fused mask. Chaining blocks lets the two
branches negotiate which one to trust where.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .layers import ChannelAttention


def emphasize(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Scale features by (1 + mask); a zero mask is the identity.

    features: [N, C, H, W], mask: [N, 1, H, W] broadcast over channels.
    """
    if features.shape[-2:] != mask.shape[-2:] or features.shape[0] != mask.shape[0]:
        raise ValueError(
            f"feature/mask shape mismatch: {tuple(features.shape)} vs {tuple(mask.shape)}"
        )
    return features * (1.0 + mask)


class AttentionFuse(nn.Module):
    """Channel-attention gating followed by one 3x3 convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.attention = ChannelAttention(in_channels)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.attention(x))


class FusedMaskHead(nn.Module):
    """1x1 convolution + sigmoid: fused feature -> mask in (0,1)."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(x))


class BlockResult(NamedTuple):
    f_e: torch.Tensor
    f_i: torch.Tensor
    m_e: torch.Tensor
    m_i: torch.Tensor
    f_fused: torch.Tensor
    m_fused: torch.Tensor


class ConsensusBlock(nn.Module):
    """One fuse-feedback-update round over (F_e, F_i, M_e, M_i).

    Non-last blocks concatenate the emphasized features (2C channels in and
    out of the attention stage), split the fused feature back into per-branch
    halves (first C -> event, last C -> frame), and update features and masks
    residually. The last block adds the emphasized features instead and maps
    C -> 2C, returning the final fused feature without feedback.
    """

    def __init__(self, channels: int, is_last: bool):
        super().__init__()
        self.channels = channels
        self.is_last = is_last
        if is_last:
            self.fuse = AttentionFuse(channels, 2 * channels)
        else:
            self.fuse = AttentionFuse(2 * channels, 2 * channels)
        self.mask_head = FusedMaskHead(2 * channels)

    def forward(self, f_e, f_i, m_e, m_i) -> BlockResult:
        emph_e = emphasize(f_e, m_e)
        emph_i = emphasize(f_i, m_i)
        if self.is_last:
            f_fused = self.fuse(emph_e + emph_i)
            m_fused = self.mask_head(f_fused)
            return BlockResult(f_e, f_i, m_e, m_i, f_fused, m_fused)
        f_fused = self.fuse(torch.cat([emph_e, emph_i], dim=1))
        m_fused = self.mask_head(f_fused)
        c = self.channels
        new_f_e = f_e + f_fused[:, :c]
        new_f_i = f_i + f_fused[:, c:]
        new_m_e = m_e + m_fused
        new_m_i = m_i + m_fused
        return BlockResult(new_f_e, new_f_i, new_m_e, new_m_i, f_fused, m_fused)


class ConsensusFusion(nn.Module):
    """Chain of consensus blocks at the deepest pyramid level.

    Returns the final fused feature [N, 2C, H', W'] and the per-block fused
    masks stacked along channels [N, n_blocks, H', W'].
    """

    def __init__(self, channels: int, n_blocks: int = 3):
        super().__init__()
        if n_blocks < 1:
            raise ValueError(f"need at least one block, got {n_blocks}")
        self.blocks = nn.ModuleList(
            ConsensusBlock(channels, is_last=(i == n_blocks - 1)) for i in range(n_blocks)
        )

    def forward_detailed(self, f_e, f_i, m_e, m_i) -> list[BlockResult]:
        results = []
        state = (f_e, f_i, m_e, m_i)
        for block in self.blocks:
            res = block(*state)
            results.append(res)
            state = (res.f_e, res.f_i, res.m_e, res.m_i)
        return results

    def forward(self, f_e, f_i, m_e, m_i) -> tuple[torch.Tensor, torch.Tensor]:
        results = self.forward_detailed(f_e, f_i, m_e, m_i)
        m_stack = torch.cat([r.m_fused for r in results], dim=1)
        return results[-1].f_fused, m_stack
