"""Synthetic data harness: textured-plane scenes, frames, events, depth.

Scenes are fronto-parallel textured rectangles at known metric depths in
front of an infinite background plane, viewed by a translating pinhole
camera. Rendering is analytic (no rasterizer), so ground-truth depth is
exact and every pixel is covered. Night capture is emulated by a lighting
gain: frames dim and lose contrast, while events depend only on
log-intensity changes and are unaffected by a constant gain.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError
from .events import EventStream, build_voxel_grid, make_stream, slice_window
from .io import write_sequence_dir
from .masks import sobel_edges
from .objectives import DepthRaster

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-3


@dataclass(frozen=True)
class Texture:
    """Smooth procedural intensity pattern over world (x, y) in meters."""

    base: float
    amp1: float
    fx1: float
    fy1: float
    ph1x: float
    ph1y: float
    amp2: float
    fx2: float
    fy2: float
    ph2: float

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (
            self.base
            + self.amp1 * np.sin(self.fx1 * x + self.ph1x) * np.sin(self.fy1 * y + self.ph1y)
            + self.amp2 * np.sin(self.fx2 * x + self.fy2 * y + self.ph2)
        )


@dataclass(frozen=True)
class Plane:
    """Fronto-parallel textured rectangle at world depth z (half_* None = infinite)."""

    z: float
    cx: float
    cy: float
    half_w: Optional[float]
    half_h: Optional[float]
    texture: Texture


@dataclass(frozen=True)
class SyntheticScene:
    planes: tuple[Plane, ...]
    background: Plane
    cam_path: np.ndarray  # [steps, 3] camera positions (x, y, z)
    gains: np.ndarray  # [steps]
    focal: float  # pixels

    @property
    def steps(self) -> int:
        return int(self.cam_path.shape[0])


def make_scene(
    seed,
    steps: int = 24,
    resolution: int = 64,
    gain: float = 1.0,
    n_planes: Optional[int] = None,
) -> SyntheticScene:
    """Randomized but fully determined scene: planes, textures, camera motion."""
    if steps < 2:
        raise ConfigError(f"need at least 2 steps, got {steps}")
    if gain <= 0 or gain > 1:
        raise ConfigError(f"gain must be in (0, 1], got {gain}")
    rng = np.random.default_rng(seed)
    focal = float(resolution)

    def texture(z: float) -> Texture:
        # pick world frequencies so projected wavelengths land around 8-24 px
        lam = rng.uniform(8.0, 24.0, size=3) * z / focal
        f1, f2, f3 = 2.0 * math.pi / lam
        return Texture(
            base=rng.uniform(0.45, 0.60),
            amp1=rng.uniform(0.14, 0.22),
            fx1=f1,
            fy1=f2,
            ph1x=rng.uniform(0, 2 * math.pi),
            ph1y=rng.uniform(0, 2 * math.pi),
            amp2=rng.uniform(0.08, 0.14),
            fx2=f3 * rng.uniform(0.4, 0.9),
            fy2=f3 * rng.uniform(0.4, 0.9),
            ph2=rng.uniform(0, 2 * math.pi),
        )

    if n_planes is None:
        n_planes = int(rng.integers(2, 4))
    zs = np.sort(rng.uniform(6.0, 26.0, size=n_planes))
    planes = []
    for z in zs:
        half_view = z * 0.5  # half extent of the view frustum at depth z
        planes.append(
            Plane(
                z=float(z),
                cx=float(rng.uniform(-0.35, 0.35) * z),
                cy=float(rng.uniform(-0.35, 0.35) * z),
                half_w=float(rng.uniform(0.3, 0.65) * half_view),
                half_h=float(rng.uniform(0.3, 0.65) * half_view),
                texture=texture(float(z)),
            )
        )
    bg_z = float(rng.uniform(40.0, 60.0))
    background = Plane(z=bg_z, cx=0.0, cy=0.0, half_w=None, half_h=None, texture=texture(bg_z))

    # lateral speed sized for ~1-3 px/step optical flow on the nearest plane;
    # forward speed capped so the camera never reaches the nearest plane
    z_near = float(zs[0])
    vx = rng.uniform(1.0, 2.5) * z_near / focal * rng.choice([-1.0, 1.0])
    vy = rng.uniform(0.3, 1.0) * z_near / focal * rng.choice([-1.0, 1.0])
    vz = rng.uniform(0.0, min(0.1, (z_near - 3.0) / (2.0 * steps)))
    cam_path = np.arange(steps, dtype=np.float64)[:, None] * np.array([vx, vy, vz])
    gains = np.full(steps, float(gain))
    return SyntheticScene(
        planes=tuple(planes),
        background=background,
        cam_path=cam_path,
        gains=gains,
        focal=focal,
    )


def render_sequence(
    scene: SyntheticScene, resolution: int = 64
) -> tuple[np.ndarray, list[DepthRaster]]:
    """Render frames [steps, H, W] in [0,1] and exact z-buffer depth rasters."""
    h = w = int(resolution)
    dir_x = (np.arange(w, dtype=np.float64) - (w - 1) / 2.0) / scene.focal
    dir_y = (np.arange(h, dtype=np.float64) - (h - 1) / 2.0) / scene.focal
    dir_x = dir_x[None, :]  # [1, W]
    dir_y = dir_y[:, None]  # [H, 1]
    frames = np.empty((scene.steps, h, w), dtype=np.float64)
    depths = []
    ordered = sorted(scene.planes, key=lambda p: p.z, reverse=True)  # paint far to near
    for k in range(scene.steps):
        cx, cy, cz = scene.cam_path[k]
        img = np.empty((h, w), dtype=np.float64)
        depth = np.empty((h, w), dtype=np.float64)
        for plane in [scene.background] + ordered:
            s = plane.z - cz
            if s <= 0:
                raise DataError(f"camera passed through plane at z={plane.z}")
            x_world = cx + s * dir_x
            y_world = cy + s * dir_y
            tex = plane.texture.sample(x_world, y_world)
            if plane.half_w is None:
                img[:] = tex
                depth[:] = s
            else:
                inside = (np.abs(x_world - plane.cx) <= plane.half_w) & (
                    np.abs(y_world - plane.cy) <= plane.half_h
                )
                img = np.where(inside, tex, img)
                depth = np.where(inside, s, depth)
        frames[k] = np.clip(img * scene.gains[k], 0.0, 1.0)
        depths.append(
            DepthRaster(data=depth, valid=np.ones((h, w), dtype=bool), space="meters")
        )
    return frames, depths


def simulate_events(
    frames: np.ndarray,
    timestamps_us: np.ndarray,
    threshold_c: float,
    substeps: int = 10,
) -> EventStream:
    """Threshold-crossing event simulation on temporally upsampled frames.

    Intensity is linearly interpolated at `substeps` points per frame
    interval; a pixel emits an event whenever its log intensity (floored at
    1e-3) moves a full threshold away from its per-pixel reference level,
    which then steps by the crossed multiples. Event timestamps are linearly
    interpolated within the substep and floored to integer microseconds.
    """
    if threshold_c <= 0:
        raise ConfigError(f"threshold must be positive, got {threshold_c}")
    if substeps < 1:
        raise ConfigError(f"substeps must be >= 1, got {substeps}")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise DataError(f"expected frames [T, H, W], got {frames.shape}")
    timestamps_us = np.asarray(timestamps_us, dtype=np.int64)
    if timestamps_us.shape != (frames.shape[0],) or np.any(np.diff(timestamps_us) <= 0):
        raise DataError("timestamps must be one ascending value per frame")

    c = float(threshold_c)
    ref = np.log(np.maximum(frames[0], LOG_FLOOR))
    prev_log = ref.copy()
    out_t, out_x, out_y, out_p = [], [], [], []

    for k in range(frames.shape[0] - 1):
        ia, ib = frames[k], frames[k + 1]
        ta, tb = float(timestamps_us[k]), float(timestamps_us[k + 1])
        for j in range(1, substeps + 1):
            t_lo = ta + (tb - ta) * (j - 1) / substeps
            t_hi = ta + (tb - ta) * j / substeps
            frac = j / substeps
            cur_log = np.log(np.maximum(ia + (ib - ia) * frac, LOG_FLOOR))
            diff = cur_log - ref
            n_pos = np.where(diff > 0, np.floor(diff / c), 0.0).astype(np.int64)
            n_neg = np.where(diff < 0, np.floor(-diff / c), 0.0).astype(np.int64)
            for count, sign in ((n_pos, 1), (n_neg, -1)):
                n_max = int(count.max()) if count.size else 0
                for i in range(1, n_max + 1):
                    yy, xx = np.nonzero(count >= i)
                    if yy.size == 0:
                        continue
                    level = ref[yy, xx] + sign * i * c
                    rise = cur_log[yy, xx] - prev_log[yy, xx]
                    f = (level - prev_log[yy, xx]) / rise  # in (0, 1] by construction
                    tt = np.floor(t_lo + (t_hi - t_lo) * f).astype(np.int64)
                    out_t.append(tt)
                    out_x.append(xx.astype(np.int64))
                    out_y.append(yy.astype(np.int64))
                    out_p.append(np.full(yy.size, sign, dtype=np.int64))
            ref = ref + (n_pos - n_neg) * c
            prev_log = cur_log

    if not out_t:
        empty = np.empty(0, dtype=np.int64)
        return make_stream(empty, empty, empty, empty)
    t = np.concatenate(out_t)
    x = np.concatenate(out_x)
    y = np.concatenate(out_y)
    p = np.concatenate(out_p)
    order = np.lexsort((p, x, y, t))
    return make_stream(t[order], x[order], y[order], p[order])


class SequenceSample(NamedTuple):
    """One L-step training/eval sample with aligned tensors."""

    frames: torch.Tensor  # [L, 1, H, W] float32 in [0,1]
    voxels: torch.Tensor  # [L, B, H, W] float32 raw deposits
    gt_depth: torch.Tensor  # [L, 1, H, W] float32 meters (0 where invalid)
    gt_valid: torch.Tensor  # [L, 1, H, W] bool
    rasters: tuple  # the L source DepthRasters (meters)
    masks: Optional[tuple] = None  # (mask_event, mask_frame) if heads were given


class AssembleResult(NamedTuple):
    samples: list
    dropped: int


def assemble_sequences(
    frames: np.ndarray,
    events: EventStream,
    depths: Sequence[DepthRaster],
    seq_len: int = 8,
    delta_t: int = 40_000,
    bins: int = 5,
    mask_heads=None,
) -> AssembleResult:
    """Group frames into non-overlapping L-step samples with aligned voxels.

    Frame k is paired with the events in (t_{k-1}, t_k] where t_k = k*delta_t;
    trailing frames that cannot fill a group are dropped and counted.
    mask_heads, when given as (event_head, frame_head), attaches initial
    reliability masks to each sample.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise DataError(f"expected frames [T, H, W], got {frames.shape}")
    t_total, h, w = frames.shape
    if len(depths) != t_total:
        raise DataError(f"{t_total} frames but {len(depths)} depth rasters")
    if seq_len < 1 or delta_t <= 0:
        raise ConfigError("seq_len and delta_t must be positive")

    n_samples = t_total // seq_len
    dropped = t_total - n_samples * seq_len
    if dropped:
        log.info("assemble_sequences: dropped %d trailing frames", dropped)
    samples = []
    for s in range(n_samples):
        f_list, v_list, d_list, m_list, rasters = [], [], [], [], []
        for j in range(seq_len):
            g = s * seq_len + j
            t_frame = g * int(delta_t)
            window = slice_window(events, t_frame - int(delta_t) + 1, t_frame + 1, index=g)
            grid = build_voxel_grid(window, bins, h, w)
            f_list.append(frames[g])
            v_list.append(grid.data)
            raster = depths[g]
            if raster.data.shape != (h, w):
                raise DataError(f"depth raster {g} shape {raster.data.shape} != frame {h}x{w}")
            rasters.append(raster)
            d_list.append(np.where(raster.valid, raster.data, 0.0))
            m_list.append(raster.valid)
        sample_frames = torch.from_numpy(np.stack(f_list)).float().unsqueeze(1)
        sample_voxels = torch.from_numpy(np.stack(v_list)).float()
        sample_gt = torch.from_numpy(np.stack(d_list)).float().unsqueeze(1)
        sample_valid = torch.from_numpy(np.stack(m_list)).unsqueeze(1)
        masks = None
        if mask_heads is not None:
            event_head, frame_head = mask_heads
            with torch.no_grad():
                masks = (event_head(sample_voxels), frame_head(sample_frames))
        samples.append(
            SequenceSample(
                frames=sample_frames,
                voxels=sample_voxels,
                gt_depth=sample_gt,
                gt_valid=sample_valid,
                rasters=tuple(rasters),
                masks=masks,
            )
        )
    return AssembleResult(samples=samples, dropped=dropped)


def frame_edge_energy(frames: np.ndarray) -> float:
    """Mean Sobel magnitude over a frame stack (the night-emulation probe)."""
    t = torch.from_numpy(np.asarray(frames, dtype=np.float64)).unsqueeze(1)
    return float(sobel_edges(t).mean())


def synth_dataset(
    root,
    sequences: int = 8,
    frames_per_scene: int = 24,
    resolution: int = 64,
    gain: float = 1.0,
    threshold_c: float = 0.2,
    frame_period_us: int = 40_000,
    alpha: float = 3.7,
    d_max: float = 80.0,
    seed: int = 0,
    substeps: int = 10,
) -> dict:
    """Write `sequences` synthetic sequence dirs under root; return stats."""
    os.makedirs(root, exist_ok=True)
    total_events = 0
    edge_energies = []
    for i in range(sequences):
        scene = make_scene([seed, i], steps=frames_per_scene, resolution=resolution, gain=gain)
        frames, depths = render_sequence(scene, resolution)
        timestamps = np.arange(frames_per_scene, dtype=np.int64) * int(frame_period_us)
        events = simulate_events(frames, timestamps, threshold_c, substeps)
        total_events += len(events)
        quantized = np.rint(frames * 255.0) / 255.0
        edge_energies.append(frame_edge_energy(quantized))
        depths = [
            dataclasses.replace(d, alpha=float(alpha), d_max=float(d_max)) for d in depths
        ]
        meta = {
            "resolution": int(resolution),
            "frame_period_us": int(frame_period_us),
            "alpha": float(alpha),
            "d_max": float(d_max),
            "threshold_C": float(threshold_c),
        }
        write_sequence_dir(os.path.join(root, f"seq{i:03d}"), frames, events, depths, meta)
    return {
        "sequences": int(sequences),
        "events_total": int(total_events),
        "events_per_sequence": total_events / max(sequences, 1),
        "mean_edge_energy": float(np.mean(edge_energies)),
    }
