"""JSON configuration: one flat object holding model and training keys.

Missing keys take the paper-scale defaults (``d_e=64``, 16 residual blocks,
``d_z=256``, 16 heads, ``T=2``, lr 4e-5 -> 4e-4, 1000 epochs, batch 64,
128x128 patches with 128^2 sampled pixels). Unknown keys are an error.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .operator import SrnoConfig
from .train import TrainConfig

ENCODER_KEYS = {"d_e", "n_blocks", "kernel"}
MODEL_KEYS = {f.name for f in fields(SrnoConfig)} - {"encoder"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

DESK_OVERRIDES = {
    "d_e": 32, "n_blocks": 4, "d_z": 64, "n_heads": 4, "T": 2, "d_ffn": 64,
    "patch_size": 48, "n_query": 48 * 48, "batch_size": 8,
}

_FLOAT_KEYS = {"ln_eps", "lr_init", "lr_max", "warmup_epochs", "beta1", "beta2", "adam_eps"}
_BOOL_KEYS = {"out_proj", "swap_kv"}
_STR_KEYS = {"sample_mode"}


def _coerce(key, value):
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if key == "val_scales":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(key, "expected a list of numbers")
        return tuple(float(v) for v in value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if key in _FLOAT_KEYS:
        return float(value)
    if float(value) != int(value):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    return int(value)


def config_from_dict(raw: dict) -> tuple[SrnoConfig, TrainConfig]:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    enc_kw, model_kw, train_kw = {}, {}, {}
    for key, value in raw.items():
        if key in ENCODER_KEYS:
            enc_kw[key] = _coerce(key, value)
        elif key in MODEL_KEYS:
            model_kw[key] = _coerce(key, value)
        elif key in TRAIN_KEYS:
            train_kw[key] = _coerce(key, value)
        else:
            raise ConfigError(key, "unknown configuration key")
    try:
        model = SrnoConfig(encoder=EncoderConfig(**enc_kw), **model_kw)
        train = TrainConfig(**train_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("<root>", str(exc)) from exc
    return model, train


def parse_config(path) -> tuple[SrnoConfig, TrainConfig]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"malformed JSON: {exc}") from exc
    return config_from_dict(raw)


def desk_config(**overrides) -> tuple[SrnoConfig, TrainConfig]:
    return config_from_dict({**DESK_OVERRIDES, **overrides})


def model_config_dict(cfg: SrnoConfig) -> dict:
    d = asdict(cfg)
    enc = d.pop("encoder")
    return {**enc, **d}


def model_config_from_dict(d: dict) -> SrnoConfig:
    unknown = set(d) - ENCODER_KEYS - MODEL_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown model configuration key")
    model, _ = config_from_dict({k: v for k, v in d.items()})
    return model
