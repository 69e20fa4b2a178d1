"""Run configuration: one flat dataclass, JSON-loadable, flag-overridable."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError


@dataclass
class RunConfig:
    # reproducibility / data
    seed: int = 0
    resolution: int = 64
    bins: int = 5
    seq_len: int = 8
    sequences: int = 8
    frames_per_scene: int = 24
    frame_period_us: int = 40_000
    threshold_c: float = 0.2
    gain: float = 1.0
    substeps: int = 10

    # model
    channels: tuple = (16, 32, 64)
    patches: tuple = (8, 16, 32)
    n_blocks: int = 3
    state_channels: int = 16
    decoder_channels: tuple = (48, 32, 24)
    neighbors: int = 8
    offset_radius: float = 6.0
    prop_iters: int = 18

    # objectives
    alpha: float = 3.7
    d_max: float = 80.0
    loss_lambda: float = 0.25
    loss_scales: int = 4
    cutoffs: tuple = (10.0, 20.0, 30.0)

    # optimization
    lr_fusion: float = 5e-6
    lr_refine: float = 1e-5
    batch_size: int = 4
    epochs: int = 100
    grad_clip: float = 1.0
    augment: bool = True
    crop: Optional[int] = None
    flip_prob: float = 0.5
    zero_events: bool = False

    def __post_init__(self):
        for name in ("channels", "patches", "decoder_channels", "cutoffs"):
            value = getattr(self, name)
            if isinstance(value, list):
                object.__setattr__(self, name, tuple(value))
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if len(self.channels) != 3:
            raise ConfigError(f"expected 3 encoder channel counts, got {self.channels}")
        if len(self.decoder_channels) != 3:
            raise ConfigError(f"expected 3 decoder channel counts, got {self.decoder_channels}")
        if self.alpha <= 0 or self.d_max <= 0:
            raise ConfigError("alpha and d_max must be positive")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**data)


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Load a JSON config file (or defaults when path is None), then apply overrides.

    Override values of None mean "not set on the command line" and are ignored.
    """
    data = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in _FIELD_NAMES:
                raise ConfigError(f"unknown config key: {key}")
            data[key] = value
    return config_from_dict(data)
