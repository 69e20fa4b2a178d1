"""Training and evaluation loops.

Determinism contract: sample order is derived from (seed, epoch) and
augmentation from (seed, epoch, sample index), so a run resumed from a
checkpoint consumes exactly the randomness an unbroken run would have —
nothing is drawn from a long-lived RNG stream that would need serializing.
"""

from __future__ import annotations

import logging
import os
import time
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_model, save_model
from .config import RunConfig
from .errors import ConfigError
from .model import DepthFusionNet
from .objectives import (
    denormalize_depth_tensor,
    depth_metrics,
    normalize_depth_tensor,
    sequence_loss_terms,
)
from .synth import SequenceSample

log = logging.getLogger(__name__)


def build_model(cfg: RunConfig) -> DepthFusionNet:
    return DepthFusionNet(
        bins=cfg.bins,
        channels=cfg.channels,
        patches=cfg.patches,
        n_blocks=cfg.n_blocks,
        state_channels=cfg.state_channels,
        decoder_channels=cfg.decoder_channels,
        neighbors=cfg.neighbors,
        offset_radius=cfg.offset_radius,
        prop_iters=cfg.prop_iters,
    )


def _augment_sample(
    tensors: tuple[torch.Tensor, ...], rng: np.random.Generator, cfg: RunConfig
) -> tuple[torch.Tensor, ...]:
    frames, voxels, gt, valid = tensors
    if cfg.crop is not None:
        c = int(cfg.crop)
        h, w = frames.shape[-2:]
        if c % 8 != 0:
            raise ConfigError(f"crop must be a multiple of 8, got {c}")
        if c > h or c > w:
            raise ConfigError(f"crop {c} exceeds resolution {h}x{w}")
        top = int(rng.integers(0, h - c + 1))
        left = int(rng.integers(0, w - c + 1))
        frames = frames[..., top : top + c, left : left + c]
        voxels = voxels[..., top : top + c, left : left + c]
        gt = gt[..., top : top + c, left : left + c]
        valid = valid[..., top : top + c, left : left + c]
    if rng.random() < cfg.flip_prob:
        # horizontal flip mirrors the x axis of frames, voxel grids, and depth alike
        frames = frames.flip(-1)
        voxels = voxels.flip(-1)
        gt = gt.flip(-1)
        valid = valid.flip(-1)
    return frames, voxels, gt, valid


def make_batch(
    samples: Sequence[SequenceSample], idxs: Sequence[int], cfg: RunConfig, epoch: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into [N, L, ...] tensors with per-sample augmentation."""
    frames, voxels, gts, valids = [], [], [], []
    for i in idxs:
        s = samples[int(i)]
        f, v, g, m = s.frames, s.voxels, s.gt_depth, s.gt_valid
        if cfg.zero_events:
            v = torch.zeros_like(v)
        if cfg.augment:
            rng = np.random.default_rng([cfg.seed, int(epoch), int(i)])
            f, v, g, m = _augment_sample((f, v, g, m), rng, cfg)
        frames.append(f)
        voxels.append(v)
        gts.append(g)
        valids.append(m)
    return (
        torch.stack(frames),
        torch.stack(voxels),
        torch.stack(gts),
        torch.stack(valids),
    )


def _optimizer_arrays(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for pid, state in optimizer.state_dict()["state"].items():
        for key, val in state.items():
            if torch.is_tensor(val):
                # keep 0-d moments 0-d so scalar parameters restore exactly
                arr = val.detach().cpu().numpy().astype(np.float32)
            else:
                arr = np.asarray([float(val)], dtype=np.float32)
            out[f"optim.{pid}.{key}"] = arr
    return out


def _restore_optimizer(optimizer: torch.optim.Optimizer, extras: dict) -> None:
    state: dict[int, dict] = {}
    for name, arr in extras.items():
        if not name.startswith("optim."):
            continue
        _, pid, key = name.split(".", 2)
        entry = state.setdefault(int(pid), {})
        if key == "step":
            entry[key] = torch.tensor(float(arr.reshape(-1)[0]))
        else:
            entry[key] = torch.from_numpy(np.array(arr, dtype=np.float32))
    if not state:
        return
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)


class Trainer:
    """Adam with separate learning rates for the fusion and refinement stages."""

    def __init__(self, model: DepthFusionNet, cfg: RunConfig, out_dir=None):
        self.model = model
        self.cfg = cfg
        self.out_dir = out_dir
        self.optimizer = torch.optim.Adam(
            [
                {"params": list(model.fusion_parameters()), "lr": cfg.lr_fusion},
                {"params": list(model.refine_parameters()), "lr": cfg.lr_refine},
            ]
        )
        self.epoch = 0
        self.global_step = 0
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        extras = _optimizer_arrays(self.optimizer)
        extras["meta.epoch"] = np.asarray([self.epoch], dtype=np.float32)
        extras["meta.global_step"] = np.asarray([self.global_step], dtype=np.float32)
        save_model(path, self.model, extras)

    def load(self, path) -> dict:
        extras = load_model(path, self.model)
        _restore_optimizer(self.optimizer, extras)
        if "meta.epoch" in extras:
            self.epoch = int(extras["meta.epoch"].reshape(-1)[0])
        if "meta.global_step" in extras:
            self.global_step = int(extras["meta.global_step"].reshape(-1)[0])
        return extras

    # -- optimization -------------------------------------------------------

    def step_batch(
        self, batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]
    ) -> tuple[float, float, float]:
        """One optimizer step; returns (mse_sum, grad_sum, total) as floats."""
        cfg = self.cfg
        frames, voxels, gt_m, valid = batch
        outputs = self.model.forward_sequence(voxels, frames)
        preds = [o.refined for o in outputs]
        targets = normalize_depth_tensor(gt_m, cfg.alpha, cfg.d_max)
        target_list = [targets[:, k] for k in range(targets.shape[1])]
        valid_list = [valid[:, k] for k in range(valid.shape[1])]
        terms = sequence_loss_terms(preds, target_list, valid_list, cfg.loss_scales)
        mse_sum = sum(m for m, _ in terms)
        grad_sum = sum(g for _, g in terms)
        total = mse_sum + cfg.loss_lambda * grad_sum
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip and cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        return float(mse_sum.detach()), float(grad_sum.detach()), float(total.detach())

    def fit(
        self,
        samples: Sequence[SequenceSample],
        epochs: Optional[int] = None,
        max_steps: Optional[int] = None,
        stop_below_fraction: Optional[float] = None,
        log_path=None,
        checkpoint_every_epoch: bool = True,
    ) -> dict:
        """Train until `epochs` (absolute epoch count, so resumes continue it).

        stop_below_fraction ends training once the per-step total loss drops
        below that fraction of the first step's loss in this call; max_steps
        caps optimizer steps in this call. Loss rows (step, mse, grad, total)
        are appended to log_path as CSV.
        """
        cfg = self.cfg
        target_epochs = cfg.epochs if epochs is None else int(epochs)
        if len(samples) == 0:
            raise ConfigError("no training samples")
        started = time.perf_counter()
        steps_done = 0
        initial = None
        final = None
        stopped_early = False

        log_fh = None
        if log_path is not None:
            fresh = self.global_step == 0 or not os.path.exists(log_path)
            log_fh = open(log_path, "w" if fresh else "a", encoding="utf-8")
            if fresh:
                log_fh.write("step,mse,grad,total\n")

        try:
            while self.epoch < target_epochs and not stopped_early:
                order = np.random.default_rng([cfg.seed, self.epoch]).permutation(len(samples))
                for start in range(0, len(order), cfg.batch_size):
                    idxs = order[start : start + cfg.batch_size]
                    batch = make_batch(samples, idxs, cfg, self.epoch)
                    mse, grad, total = self.step_batch(batch)
                    self.global_step += 1
                    steps_done += 1
                    final = total
                    if initial is None:
                        initial = total
                    if log_fh is not None:
                        log_fh.write(
                            f"{self.global_step},{mse:.10g},{grad:.10g},{total:.10g}\n"
                        )
                        log_fh.flush()
                    if stop_below_fraction is not None and total < stop_below_fraction * initial:
                        stopped_early = True
                        break
                    if max_steps is not None and steps_done >= max_steps:
                        stopped_early = True
                        break
                else:
                    self.epoch += 1
                    if checkpoint_every_epoch and self.out_dir is not None:
                        self.save(os.path.join(self.out_dir, f"ckpt_epoch_{self.epoch:04d}.efd"))
                        self.save(os.path.join(self.out_dir, "ckpt_latest.efd"))
                    continue
                break  # inner loop broke -> stop outer loop too
        finally:
            if log_fh is not None:
                log_fh.close()
        if self.out_dir is not None:
            self.save(os.path.join(self.out_dir, "ckpt_latest.efd"))
        return {
            "steps": steps_done,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "initial_loss": initial,
            "final_loss": final,
            "seconds": time.perf_counter() - started,
            "stopped_early": stopped_early,
        }


# ---------------------------------------------------------------------------
# evaluation


def predict_sample(
    model: DepthFusionNet, sample: SequenceSample, cfg: RunConfig
) -> torch.Tensor:
    """Predicted metric depth [L, 1, H, W] for one sample (no grad)."""
    voxels = sample.voxels.unsqueeze(0)
    if cfg.zero_events:
        voxels = torch.zeros_like(voxels)
    frames = sample.frames.unsqueeze(0)
    with torch.no_grad():
        outputs = model.forward_sequence(voxels, frames)
        refined = torch.cat([o.refined for o in outputs], dim=0)  # [L, 1, H, W]
    return denormalize_depth_tensor(refined.clamp(0.0, 1.0), cfg.alpha, cfg.d_max)


def evaluate_samples(
    model: DepthFusionNet,
    grouped: dict[str, list[SequenceSample]],
    cfg: RunConfig,
    use_gt: bool = False,
) -> tuple[dict[str, dict], dict[str, np.ndarray]]:
    """Metric records per sequence group plus 'all'; also returns predictions.

    use_gt bypasses the model and scores ground truth against itself — a
    plumbing check that must produce exactly zero errors.
    """
    records: dict[str, dict] = {}
    dumps: dict[str, np.ndarray] = {}
    all_pred, all_gt, all_valid = [], [], []
    model.eval()
    for name, samples in grouped.items():
        preds, gts, valids = [], [], []
        for j, sample in enumerate(samples):
            gt = sample.gt_depth.squeeze(1).numpy().astype(np.float64)
            valid = sample.gt_valid.squeeze(1).numpy()
            if use_gt:
                pred = gt.copy()
            else:
                pred = predict_sample(model, sample, cfg).squeeze(1).numpy().astype(np.float64)
            dumps[f"{name}_s{j:02d}"] = pred
            preds.append(pred.reshape(-1))
            gts.append(gt.reshape(-1))
            valids.append(valid.reshape(-1))
        p = np.concatenate(preds)
        g = np.concatenate(gts)
        v = np.concatenate(valids)
        records[name] = depth_metrics(p, g, v, cutoffs=cfg.cutoffs)
        all_pred.append(p)
        all_gt.append(g)
        all_valid.append(v)
    if all_pred:
        records["all"] = depth_metrics(
            np.concatenate(all_pred),
            np.concatenate(all_gt),
            np.concatenate(all_valid),
            cutoffs=cfg.cutoffs,
        )
    return records, dumps
