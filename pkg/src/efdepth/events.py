"""Asynchronous event streams, fixed-stride windowing, and voxel-grid encoding.

Events are (x, y, t, p) with integer microsecond timestamps and polarity
in {-1, +1}. A window of events is encoded as a B x H x W voxel grid by
depositing each polarity into the two temporally adjacent bins with
linear weights, then standardizing over nonzero cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Columnar event storage, sorted by timestamp ascending."""

    t: np.ndarray  # int64 microseconds
    x: np.ndarray  # int32 column
    y: np.ndarray  # int32 row
    p: np.ndarray  # int8 polarity, -1 or +1

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))


def make_stream(t, x, y, p) -> EventStream:
    """Build a validated EventStream from array-likes."""
    t = np.asarray(t, dtype=np.int64)
    x = np.asarray(x, dtype=np.int32)
    y = np.asarray(y, dtype=np.int32)
    p = np.asarray(p, dtype=np.int8)
    if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
        raise DataError("event arrays must be 1-d and equal length")
    if len(t) > 0:
        if np.any(np.diff(t) < 0):
            bad = int(np.argmax(np.diff(t) < 0)) + 1
            raise DataError(f"event timestamps not sorted ascending at index {bad}")
        if np.any(t < 0):
            raise DataError("negative event timestamp")
        if not np.all(np.abs(p) == 1):
            raise DataError("event polarity must be -1 or +1")
        if np.any(x < 0) or np.any(y < 0):
            raise DataError("negative event coordinate")
    return EventStream(t=t, x=x, y=y, p=p)


@dataclass(frozen=True)
class EventWindow:
    """Events inside [t_start, t_end), plus window ordinal and partial flag."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t_start: int
    t_end: int
    index: int
    partial: bool = False

    def __len__(self) -> int:
        return int(self.t.shape[0])


@dataclass(frozen=True)
class VoxelGrid:
    """B x H x W temporal-bin encoding of one event window."""

    data: np.ndarray  # float32 [B, H, W]
    normalized: bool = False


def accumulate_windows(stream: EventStream, delta_t: int) -> list[EventWindow]:
    """Tile the stream's time span into non-overlapping windows of delta_t.

    Windows are anchored at the first event timestamp. Every event lands in
    exactly one window. The final window is flagged partial: the stream ends
    inside it, so there is no evidence the full span was recorded.
    """
    if delta_t <= 0:
        raise ConfigError(f"delta_t must be positive, got {delta_t}")
    if len(stream) == 0:
        return []
    t0 = int(stream.t[0])
    t_last = int(stream.t[-1])
    n_windows = (t_last - t0) // int(delta_t) + 1
    edges = t0 + np.arange(1, n_windows + 1, dtype=np.int64) * int(delta_t)
    bounds = np.searchsorted(stream.t, edges, side="left")
    windows = []
    lo = 0
    for k in range(n_windows):
        hi = int(bounds[k])
        windows.append(
            EventWindow(
                t=stream.t[lo:hi],
                x=stream.x[lo:hi],
                y=stream.y[lo:hi],
                p=stream.p[lo:hi],
                t_start=t0 + k * int(delta_t),
                t_end=t0 + (k + 1) * int(delta_t),
                index=k,
                partial=(k == n_windows - 1),
            )
        )
        lo = hi
    return windows


def slice_window(
    stream: EventStream, t_start: int, t_end: int, index: int = 0, partial: bool = False
) -> EventWindow:
    """Cut the events with t_start <= t < t_end out of a sorted stream."""
    if t_end <= t_start:
        raise ConfigError("t_end must exceed t_start")
    lo = int(np.searchsorted(stream.t, t_start, side="left"))
    hi = int(np.searchsorted(stream.t, t_end, side="left"))
    return EventWindow(
        t=stream.t[lo:hi],
        x=stream.x[lo:hi],
        y=stream.y[lo:hi],
        p=stream.p[lo:hi],
        t_start=int(t_start),
        t_end=int(t_end),
        index=index,
        partial=partial,
    )


def temporal_weights(t: np.ndarray, t_start: int, t_end: int, bins: int):
    """Linear split of each event between its two adjacent bins.

    Returns (left_bin, left_weight, right_weight); the right bin is
    left_bin + 1 and its weight is zero whenever that would fall past the
    last bin. Weights are non-negative and sum to 1 per event.
    """
    span = float(t_end - t_start)
    pos = (t.astype(np.float64) - float(t_start)) / span * (bins - 1)
    left = np.floor(pos).astype(np.int64)
    # events sit in [t_start, t_end) so pos < bins-1 up to rounding; clamp the
    # rounding case onto the last bin with full weight
    left = np.minimum(left, bins - 1)
    w_right = pos - left
    w_left = 1.0 - w_right
    return left, w_left, w_right


def build_voxel_grid(window: EventWindow, bins: int, height: int, width: int) -> VoxelGrid:
    """Deposit window polarities into a B x H x W grid, linearly in time."""
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    if window.t_end <= window.t_start:
        raise ConfigError("degenerate window: t_end <= t_start")
    data = np.zeros((bins, height, width), dtype=np.float32)
    n = len(window)
    if n == 0:
        return VoxelGrid(data=data, normalized=False)
    if np.any(window.x >= width) or np.any(window.y >= height):
        raise DataError(f"event coordinates outside {height}x{width} sensor area")
    if bins == 1:
        np.add.at(data[0], (window.y, window.x), window.p.astype(np.float32))
        return VoxelGrid(data=data, normalized=False)

    left, w_left, w_right = temporal_weights(window.t, window.t_start, window.t_end, bins)
    pol = window.p.astype(np.float64)
    flat = data.reshape(-1)
    lin = window.y.astype(np.int64) * width + window.x.astype(np.int64)
    np.add.at(flat, left * (height * width) + lin, (pol * w_left).astype(np.float32))
    has_right = w_right > 0
    if np.any(has_right):
        np.add.at(
            flat,
            (left[has_right] + 1) * (height * width) + lin[has_right],
            (pol[has_right] * w_right[has_right]).astype(np.float32),
        )
    return VoxelGrid(data=data, normalized=False)


def normalize_voxel_grid(grid: VoxelGrid) -> VoxelGrid:
    """Standardize nonzero cells to zero mean / unit std; zeros stay zero.

    Statistics are computed over the nonzero-cell population only, so the
    encoding stays comparable across windows with very different event
    counts. An all-zero grid passes through unchanged (division guard), as
    does the degenerate single-value case.
    """
    if grid.normalized:
        raise ConfigError("grid already normalized")
    data = grid.data
    mask = data != 0
    if not mask.any():
        return VoxelGrid(data=data.copy(), normalized=True)
    vals = data[mask].astype(np.float64)
    mean = vals.mean()
    std = vals.std()  # population std
    out = np.zeros_like(data)
    if std == 0.0:
        # every nonzero cell holds the same value; center it to 0
        return VoxelGrid(data=out, normalized=True)
    out[mask] = ((vals - mean) / std).astype(np.float32)
    return VoxelGrid(data=out, normalized=True)
