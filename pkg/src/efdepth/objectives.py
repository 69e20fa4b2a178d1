"""Log-depth normalization, training losses, and evaluation metrics.

Depth is supervised in a normalized log space: v = ln(d / d_max) / alpha + 1,
which maps (d_max * e^-alpha, d_max] onto (0, 1]. Losses are a per-step MSE
plus a multi-scale Sobel gradient-matching term over the residual, summed
across the sequence. Metrics operate in meters.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .layers import sobel_gxgy

log = logging.getLogger(__name__)

# how many loss evaluations found no valid pixels (kept for diagnostics)
empty_valid_count = 0


@dataclass(frozen=True)
class DepthRaster:
    """Dense depth with validity, either metric ("meters") or normalized ("log01")."""

    data: np.ndarray  # float64 [H, W]
    valid: np.ndarray  # bool [H, W]
    space: str = "meters"
    alpha: Optional[float] = None
    d_max: Optional[float] = None

    def __post_init__(self):
        if self.space not in ("meters", "log01"):
            raise ConfigError(f"unknown depth space {self.space!r}")
        if self.data.shape != self.valid.shape or self.data.ndim != 2:
            raise DataError(
                f"data {self.data.shape} and valid {self.valid.shape} must be equal 2-d shapes"
            )


def log_normalize(
    raster: DepthRaster, alpha: Optional[float] = None, d_max: Optional[float] = None
) -> DepthRaster:
    """Map metric depth to [0,1] log space.

    Valid depths below the representable floor d_max * e^-alpha become 0 and
    are flagged invalid (they carry no usable log-depth information); valid
    depths above d_max clamp to 1.
    """
    if raster.space != "meters":
        raise ConfigError("log_normalize expects a meters-space raster")
    alpha = float(alpha if alpha is not None else raster.alpha)
    d_max = float(d_max if d_max is not None else raster.d_max)
    if alpha <= 0 or d_max <= 0:
        raise ConfigError(f"alpha and d_max must be positive, got {alpha}, {d_max}")
    data = raster.data.astype(np.float64)
    valid = raster.valid.copy()
    if np.any(valid & (data <= 0)):
        raise DataError("non-positive depth on a valid pixel")
    floor = d_max * math.exp(-alpha)
    below = valid & (data < floor)
    valid = valid & ~below
    out = np.zeros_like(data)
    safe = np.where(valid, data, d_max)
    out[valid] = np.clip(np.log(safe[valid] / d_max) / alpha + 1.0, 0.0, 1.0)
    return DepthRaster(data=out, valid=valid, space="log01", alpha=alpha, d_max=d_max)


def log_denormalize(raster: DepthRaster) -> DepthRaster:
    """Inverse of log_normalize: d = d_max * exp(alpha * (v - 1))."""
    if raster.space != "log01":
        raise ConfigError("log_denormalize expects a log01-space raster")
    if raster.alpha is None or raster.d_max is None:
        raise ConfigError("log01 raster is missing alpha/d_max")
    out = np.zeros_like(raster.data, dtype=np.float64)
    v = raster.data[raster.valid]
    out[raster.valid] = raster.d_max * np.exp(raster.alpha * (v - 1.0))
    return DepthRaster(
        data=out, valid=raster.valid.copy(), space="meters", alpha=raster.alpha, d_max=raster.d_max
    )


def normalize_depth_tensor(depth_m: torch.Tensor, alpha: float, d_max: float) -> torch.Tensor:
    """Tensor twin of log_normalize for training targets (no flagging)."""
    return torch.clamp(torch.log(depth_m.clamp(min=1e-12) / d_max) / alpha + 1.0, 0.0, 1.0)


def denormalize_depth_tensor(v: torch.Tensor, alpha: float, d_max: float) -> torch.Tensor:
    return d_max * torch.exp(alpha * (v - 1.0))


def _bump_empty_counter(what: str) -> None:
    global empty_valid_count
    empty_valid_count += 1
    log.warning("%s saw no valid pixels; contributing 0", what)


def mse_loss(residual: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean squared residual over valid pixels; 0 if none are valid."""
    v = valid.to(residual.dtype)
    n = v.sum()
    if n.item() == 0:
        _bump_empty_counter("mse_loss")
        return residual.sum() * 0.0
    r = residual * v
    return (r * r).sum() / n


def grad_matching_loss(
    residual: torch.Tensor, valid: torch.Tensor, num_scales: int = 4
) -> torch.Tensor:
    """Sum over scales of mean |Gx| + |Gy| of the residual on valid pixels.

    Scales are produced by factor-2 average pooling; a pooled pixel is valid
    only when all four sources were. Residuals are zeroed at invalid pixels
    before pooling so garbage values cannot leak into coarser scales.
    """
    if num_scales < 1:
        raise ConfigError(f"need at least one scale, got {num_scales}")
    if residual.ndim == 2:
        residual = residual.reshape(1, 1, *residual.shape)
        valid = valid.reshape(1, 1, *valid.shape)
    v = valid.to(residual.dtype)
    r = residual * v
    total = residual.sum() * 0.0
    for s in range(num_scales):
        if s > 0:
            if min(r.shape[-2:]) < 2:
                break
            r = F.avg_pool2d(r, 2)
            v = (F.avg_pool2d(v, 2) == 1.0).to(r.dtype)
            r = r * v
        gx, gy = sobel_gxgy(r)
        n = v.sum()
        if n.item() == 0:
            _bump_empty_counter(f"grad_matching_loss scale 1/{1 << s}")
            continue
        total = total + ((gx.abs() + gy.abs()) * v).sum() / n
    return total


def sequence_loss_terms(
    predictions: Sequence[torch.Tensor],
    ground_truths: Sequence[torch.Tensor],
    valids: Sequence[torch.Tensor],
    num_scales: int = 4,
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per-step (mse, grad) pairs over a sequence of log01 maps."""
    if not (len(predictions) == len(ground_truths) == len(valids)):
        raise ConfigError("prediction/target/validity sequence lengths differ")
    terms = []
    for pred, gt, valid in zip(predictions, ground_truths, valids):
        residual = pred - gt
        terms.append(
            (mse_loss(residual, valid), grad_matching_loss(residual, valid, num_scales))
        )
    return terms


def total_loss(
    predictions: Sequence[torch.Tensor],
    ground_truths: Sequence[torch.Tensor],
    valids: Sequence[torch.Tensor],
    lam: float = 0.25,
    num_scales: int = 4,
) -> torch.Tensor:
    """Sum over the sequence of per-step mse + lam * gradient-matching."""
    terms = sequence_loss_terms(predictions, ground_truths, valids, num_scales)
    total = None
    for m, g in terms:
        step = m + lam * g
        total = step if total is None else total + step
    return total


# ---------------------------------------------------------------------------
# evaluation metrics


def depth_metrics(
    pred_m: np.ndarray,
    gt_m: np.ndarray,
    valid: np.ndarray,
    cutoffs: Sequence[float] = (10.0, 20.0, 30.0),
) -> dict:
    """Standard depth-estimation metric record, computed in meters.

    Cutoff entries restrict to ground truth <= cutoff; everything else uses
    all valid pixels. Returns nine keys: avg_abs_error (dict keyed by
    cutoff), abs_rel, sq_rel, rmse, rmse_log, si_log, delta_1..delta_3.
    """
    pred_m = np.asarray(pred_m, dtype=np.float64)
    gt_m = np.asarray(gt_m, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not (pred_m.shape == gt_m.shape == valid.shape):
        raise DataError("prediction/ground-truth/validity shapes differ")
    p = pred_m[valid]
    g = gt_m[valid]
    if p.size == 0:
        nan = float("nan")
        return {
            "avg_abs_error": {f"{c:g}": nan for c in cutoffs},
            "abs_rel": nan, "sq_rel": nan, "rmse": nan, "rmse_log": nan,
            "si_log": nan, "delta_1": nan, "delta_2": nan, "delta_3": nan,
        }
    if np.any(g <= 0):
        raise DataError("non-positive ground-truth depth on a valid pixel")
    p = np.maximum(p, 1e-9)  # guard the logs; predictions are positive by construction
    err = p - g
    d = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    record = {
        "avg_abs_error": {},
        "abs_rel": float(np.mean(np.abs(err) / g)),
        "sq_rel": float(np.mean(err * err / g)),
        "rmse": float(np.sqrt(np.mean(err * err))),
        "rmse_log": float(np.sqrt(np.mean(d * d))),
        "si_log": float(np.mean(d * d) - np.mean(d) ** 2),
        "delta_1": float(np.mean(ratio < 1.25)),
        "delta_2": float(np.mean(ratio < 1.25**2)),
        "delta_3": float(np.mean(ratio < 1.25**3)),
    }
    for c in cutoffs:
        sel = g <= float(c)
        record["avg_abs_error"][f"{c:g}"] = (
            float(np.mean(np.abs(err[sel]))) if np.any(sel) else float("nan")
        )
    return record


METRIC_KEYS = (
    "avg_abs_error", "abs_rel", "sq_rel", "rmse", "rmse_log",
    "si_log", "delta_1", "delta_2", "delta_3",
)


def metrics_to_json(record: dict, indent: int = 2) -> str:
    """Serialize a metric record; NaN becomes null for strict JSON."""

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, float) and math.isnan(v):
            return None
        return v

    return json.dumps({k: clean(record[k]) for k in METRIC_KEYS}, indent=indent)


def flatten_record(record: dict) -> list[tuple[str, float]]:
    cols = [(f"abs@{c}", v) for c, v in record["avg_abs_error"].items()]
    cols += [(k, record[k]) for k in METRIC_KEYS if k != "avg_abs_error"]
    return cols


def format_metric_table(records: dict[str, dict]) -> str:
    """Aligned-column text table, one row per named record."""
    if not records:
        return "(no records)\n"
    first = next(iter(records.values()))
    headers = ["run"] + [name for name, _ in flatten_record(first)]
    rows = []
    for name, rec in records.items():
        rows.append([name] + [f"{v:.6f}" if v == v else "nan" for _, v in flatten_record(rec)])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines) + "\n"
