"""Flat run settings: defaults, config file, flag overrides (flags win)."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .grid import CHANNEL_SETS
from .models import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    # gridding
    d: float = 300.0
    t0: float = 0.0
    rows: int = 0  # 0: cover every event
    # features / model
    channels: str = "full"  # S | M | full
    window_h: int = 16
    window_w: int = 12
    n_filters: int = 16
    kernel_size: int = 3
    filter_shape: str = "KxK"  # KxK | Kx1
    n_blocks: int = 3
    loss_mode: str = "corner"  # corner | full
    # training
    lr: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    train_frac: float = 0.7
    # synthetic generator
    lambda_thread: float = 1.0 / 600.0
    mu_reply: float = 0.05
    theta: float = 300.0
    horizon: float = 86400.0
    breakout_fraction: float = 0.0
    breakout_boost: float = 1.0
    # forecast / evaluation
    n_threads: int = 6
    n_intervals: int = 10
    n_start_points: int = 20
    span_seconds: float = 3600.0
    context_cols: int = 16
    horizon_intervals: int = -1  # -1: lifetime percentile default
    # hyperparameter search
    search_filters: str = "16,32,64,128"
    search_kernels: str = "3,5,7,9"
    search_blocks: str = "3,4,5,6,7"
    budget_epochs: int = 0  # 0: full epochs

    def model_config(self, kind: str) -> ModelConfig:
        if self.channels not in CHANNEL_SETS:
            raise ConfigError(f"unknown channel set {self.channels!r}")
        if self.filter_shape not in ("KxK", "Kx1"):
            raise ConfigError(f"unknown filter shape {self.filter_shape!r}")
        k_w = 1 if self.filter_shape == "Kx1" else self.kernel_size
        return ModelConfig(
            kind=kind,
            channels=CHANNEL_SETS[self.channels],
            window=(self.window_h, self.window_w),
            n_filters=self.n_filters,
            k_h=self.kernel_size,
            k_w=k_w,
            n_blocks=self.n_blocks,
            loss_mode=self.loss_mode,
        )


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunSettings)}


def load_settings(config_path: str | None = None, overrides: dict | None = None) -> RunSettings:
    """Defaults, then config-file values, then flag overrides."""
    values: dict = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config parse failure in {config_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        for key in raw:
            if key not in _FIELDS:
                raise ConfigError(f"{config_path}: unknown config key {key!r}")
        values.update(raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = val
    try:
        return RunSettings(**values)
    except TypeError as exc:
        raise ConfigError(f"bad config values: {exc}") from exc


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def parse_float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc
