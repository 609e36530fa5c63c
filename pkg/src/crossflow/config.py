"""Versioned study configuration.

A config file is JSON holding any subset of DEFAULTS plus ``"version": 1``.
Unknown keys at any level are rejected, as are values whose type differs
from the default's (ints are accepted where floats are expected).
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping

from crossflow.datasets.splits import DESK_SPLIT_SIZES
from crossflow.errors import ConfigurationError

SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "profile": "desk",
    "data": {
        "modality": "ir_like",
        "image_size": 32,
        "min_objects": 1,
        "max_objects": 3,
        "splits": dict(DESK_SPLIT_SIZES),
        "pretrain_images": 600,
    },
    "model": {
        "patch": 8,
        "dim": 256,
        "depth": 2,
        "heads": 4,
        "mlp_ratio": 4,
        "stem_channels": 16,
        "head_channels": 16,
        "time_freqs": 64,
        "n_instructions": 4,
        "conditioning": "channel",
        "prediction": "x",
        "t_clip": 0.2,
    },
    "pretrain": {
        "steps": 600,
        "batch_size": 16,
        "learning_rate": 1e-3,
        "warmup": 50,
    },
    "sweep": {
        "configs": None,
        "translate_steps": 20,
        "fe_seed": 42,
    },
    "detector": {
        "epochs": 10,
        "batch_size": 16,
        "learning_rate": 2e-3,
        "width": 32,
        "runs": 5,
    },
}

# dataset modality -> instruction slot the adapters are trained under
MODALITY_INSTRUCTIONS = {"ir_like": 1, "sar_like": 2}


def _check_type(path: str, default, value) -> None:
    if default is None:
        return
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
    elif isinstance(default, int):
        ok = isinstance(value, int)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigurationError(f"config key {path!r}: expected {type(default).__name__}, got {type(value).__name__}")


def _merge(base: dict, override: Mapping, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {path!r}")
        default = base[key]
        if isinstance(default, dict) and key != "splits":
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"config key {path!r} must be an object")
            out[key] = _merge(default, value, path + ".")
            continue
        _check_type(path, default, value)
        if key == "splits":
            unknown = set(value) - set(default)
            if unknown:
                raise ConfigurationError(f"unknown split names in {path!r}: {sorted(unknown)}")
            out[key] = {**default, **{k: int(v) for k, v in value.items()}}
        else:
            out[key] = value
    return out


def _validate(cfg: dict) -> dict:
    if cfg["profile"] not in ("paper", "desk"):
        raise ConfigurationError(f"profile must be 'paper' or 'desk', got {cfg['profile']!r}")
    if cfg["data"]["modality"] not in MODALITY_INSTRUCTIONS:
        raise ConfigurationError(f"unknown modality {cfg['data']['modality']!r}")
    configs = cfg["sweep"]["configs"]
    if configs is not None and (not isinstance(configs, list) or not all(isinstance(i, int) and 0 <= i < 15 for i in configs)):
        raise ConfigurationError("sweep.configs must be null or a list of grid indices in [0, 15)")
    if cfg["detector"]["runs"] < 2:
        raise ConfigurationError("detector.runs must be >= 2")
    return cfg


def build_config(overrides: Mapping | None = None) -> dict:
    overrides = dict(overrides or {})
    version = overrides.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported config version {version!r}; this build reads version {SCHEMA_VERSION}")
    return _validate(_merge(DEFAULTS, overrides))


def load_config(path: str | os.PathLike | None = None, overrides: Mapping | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides`` (CLI flags)."""
    payload: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(payload, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        if "version" not in payload:
            raise ConfigurationError(f"{path}: missing 'version'")
    cfg = build_config(payload)
    if overrides:
        cfg = _validate(_merge(cfg, overrides))
    return cfg
