"""Full event-frame depth network: encoders, masks, fusion, refinement."""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from .encoders import DEFAULT_CHANNELS, PyramidEncoder
from .fusion import ConsensusFusion
from .masks import DEFAULT_PATCHES, EventMaskHead, FrameMaskHead, MaskDownsampler
from .refine import RecurrentRefiner


def normalize_voxels(voxel: torch.Tensor) -> torch.Tensor:
    """Standardize each grid's nonzero cells to zero mean / unit std.

    voxel: [N, B, H, W] raw deposits; statistics are per sample over nonzero
    cells (population std), zeros stay zero. Mirrors the numpy reference in
    events.normalize_voxel_grid.
    """
    mask = voxel != 0
    cnt = mask.sum(dim=(1, 2, 3), keepdim=True).clamp(min=1).to(voxel.dtype)
    mean = voxel.sum(dim=(1, 2, 3), keepdim=True) / cnt
    var = (((voxel - mean) ** 2) * mask).sum(dim=(1, 2, 3), keepdim=True) / cnt
    std = var.sqrt()
    out = (voxel - mean) / std.clamp(min=1e-12)
    return torch.where(mask & (std > 0), out, torch.zeros_like(voxel))


def normalize_frames(frame: torch.Tensor) -> torch.Tensor:
    """Standardize each frame to zero mean / unit std over its pixels.

    frame: [N, 1, H, W] in [0,1]. Per-sample statistics make the encoder
    input invariant to global exposure scaling, so lighting robustness is
    carried by the content (and the reliability masks), not the DC level.
    Constant frames map to zeros.
    """
    mean = frame.mean(dim=(1, 2, 3), keepdim=True)
    std = frame.std(dim=(1, 2, 3), unbiased=False, keepdim=True)
    return torch.where(
        std > 0, (frame - mean) / std.clamp(min=1e-12), torch.zeros_like(frame)
    )


class StepOutput(NamedTuple):
    refined: torch.Tensor  # [N, 1, H, W] log01
    coarse: torch.Tensor  # [N, 1, H, W] log01
    state: torch.Tensor  # [N, C_s, H/2, W/2]
    m_stack: torch.Tensor  # [N, n_blocks, H/8, W/8]
    mask_event: torch.Tensor  # [N, 1, H, W]
    mask_frame: torch.Tensor  # [N, 1, H, W]


class DepthFusionNet(nn.Module):
    """Event voxels + grayscale frames -> refined log-depth, per timestep."""

    def __init__(
        self,
        bins: int = 5,
        channels=DEFAULT_CHANNELS,
        patches=DEFAULT_PATCHES,
        n_blocks: int = 3,
        state_channels: int = 16,
        decoder_channels=(48, 32, 24),
        neighbors: int = 8,
        offset_radius: float = 6.0,
        prop_iters: int = 18,
    ):
        super().__init__()
        self.bins = bins
        self.event_encoder = PyramidEncoder(bins, channels)
        self.frame_encoder = PyramidEncoder(1, channels)
        self.event_mask_head = EventMaskHead(patches)
        self.frame_mask_head = FrameMaskHead()
        levels = self.event_encoder.levels
        self.event_mask_down = MaskDownsampler(levels)
        self.frame_mask_down = MaskDownsampler(levels)
        self.fusion = ConsensusFusion(channels[-1], n_blocks)
        self.refiner = RecurrentRefiner(
            fused_channels=2 * channels[-1],
            skip_channels=(2 * channels[-2], 2 * channels[-3]),
            decoder_channels=decoder_channels,
            state_channels=state_channels,
            mask_channels=n_blocks,
            neighbors=neighbors,
            offset_radius=offset_radius,
            iterations=prop_iters,
        )

    def fusion_parameters(self):
        """Everything upstream of (and including) the fusion stage."""
        for module in (
            self.event_encoder,
            self.frame_encoder,
            self.event_mask_head,
            self.frame_mask_head,
            self.event_mask_down,
            self.frame_mask_down,
            self.fusion,
        ):
            yield from module.parameters()

    def refine_parameters(self):
        yield from self.refiner.parameters()

    def forward_step(
        self, voxel: torch.Tensor, frame: torch.Tensor, state: Optional[torch.Tensor] = None
    ) -> StepOutput:
        # voxel: [N, B, H, W] raw deposits; frame: [N, 1, H, W] in [0,1]
        mask_event = self.event_mask_head(voxel)
        mask_frame = self.frame_mask_head(frame)
        event_pyr = self.event_encoder(normalize_voxels(voxel))
        frame_pyr = self.frame_encoder(normalize_frames(frame))
        m_e = self.event_mask_down(mask_event)
        m_i = self.frame_mask_down(mask_frame)
        f_fused, m_stack = self.fusion(event_pyr[-1], frame_pyr[-1], m_e, m_i)
        skips = (
            torch.cat([event_pyr[-2], frame_pyr[-2]], dim=1),
            torch.cat([event_pyr[-3], frame_pyr[-3]], dim=1),
        )
        res = self.refiner(f_fused, m_stack, state, skips, out_size=frame.shape[-2:])
        return StepOutput(
            refined=res.refined,
            coarse=res.coarse,
            state=res.state,
            m_stack=m_stack,
            mask_event=mask_event,
            mask_frame=mask_frame,
        )

    def forward_sequence(self, voxels: torch.Tensor, frames: torch.Tensor) -> list[StepOutput]:
        # voxels: [N, L, B, H, W]; frames: [N, L, 1, H, W]
        outputs = []
        state = None
        for k in range(voxels.shape[1]):
            step = self.forward_step(voxels[:, k], frames[:, k], state)
            outputs.append(step)
            state = step.state
        return outputs
