"""JSON run configuration with strict key checking and materialized defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

DEFAULT_CONFIG: dict = {
    "model": {
        "hidden_channels": 64,
        "latent_channels": 32,
        "num_blocks": 4,
        "modulator_hidden": 16,
        "kernel_size": 5,
        "leaky_slope": 0.2,
        "symbol_min": -127,
        "symbol_max": 127,
    },
    "train": {
        "steps": 2000,
        "batch_size": 8,
        "crop": 64,
        "lr": 1e-4,
        "lr_schedule": "cosine",
        "rate_warmup": 0.15,
        "seed": 0,
    },
    "meta": {
        "inner_lr": 1e-3,
        "inner_steps": 1,
        "outer_lr": 1e-4,
        "outer_iters": 500,
        "batch_size": 4,
        "crop": 64,
        "first_order": True,
        "quant_mode": "round",
        "clip_norm": 1.0,
        "seed": 0,
    },
    "lambdas": [0.0018, 0.0035, 0.0067, 0.013],
    "oml": {
        "iterations": 5,
        "gamma_grid": [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
        "metric": "mse",
        "gradient_mode": "autodiff",
        "fd_step": 1e-4,
        "seed": 0,
    },
    "paths": {
        "data": None,
        "out": None,
    },
}


def _merge(defaults: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be an object")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Parse a JSON config file; unknown keys are rejected, defaults filled in."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        try:
            user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(user).__name__}")
    return _merge(DEFAULT_CONFIG, user, "")
