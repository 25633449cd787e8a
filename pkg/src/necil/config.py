"""Flat, dotted-key run configuration (``pks.mode``, ``trainer.epochs``...).

Config files are YAML; nested mappings are flattened to dotted keys, so
``{"pks": {"mode": "uniform"}}`` and ``{"pks.mode": "uniform"}`` are the same.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.dir": "runs/default",
    "data.name": "synthetic",
    "data.num_classes": 10,
    "data.train_per_class": 100,
    "data.test_per_class": 40,
    "data.synthetic_seed": 0,
    "data.base_classes": 4,
    "data.classes_per_task": 3,
    "data.incremental_tasks": 2,
    "data.class_order_seed": None,
    "data.augment": True,
    "data.crop_padding": 2,
    "model.image_size": 16,
    "model.patch_size": 4,
    "model.in_channels": 3,
    "model.embed_dim": 32,
    "model.num_heads": 4,
    "model.num_encoder_blocks": 2,
    "model.num_decoder_blocks": 1,
    "model.mlp_ratio": 2.0,
    "trainer.epochs": 20,
    "trainer.batch_size": 32,
    "trainer.optimizer": "adam",
    "trainer.lr": 1e-3,
    "trainer.weight_decay": 0.0,
    "trainer.schedule": "cosine",
    "trainer.eval_each_epoch": True,
    "trainer.log_steps": False,
    "trainer.dtype": "float32",
    "loss.lambda_pks": 10.0,
    "loss.lambda_pr": 10.0,
    "pks.enabled": True,
    "pks.mode": "inverse_distance",
    "pks.epsilon": 1e-8,
    "pr.enabled": True,
    "pr.restore_count_per_sample": 1,
}

CHOICES = {
    "pks.mode": {"inverse_distance", "uniform", "distance"},
    "trainer.optimizer": {"adam", "adamw", "sgd"},
    "trainer.schedule": {"cosine", "constant"},
    "trainer.dtype": {"float32", "float64"},
}


def flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _coerce(key: str, value: object) -> object:
    default = DEFAULTS[key]
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} not in {sorted(CHOICES[key])}")
    return value


class Config(dict):
    """Validated flat mapping; every key exists in ``DEFAULTS``."""

    def __init__(self, values: dict | None = None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self[k] = v

    def __setitem__(self, key: str, value: object) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        super().__setitem__(key, _coerce(key, value))

    def update(self, other=(), **kw) -> None:  # route through validation
        for k, v in dict(other, **kw).items():
            self[k] = v

    def with_overrides(self, overrides: dict) -> "Config":
        cfg = Config(self)
        cfg.update(overrides)
        return cfg

    def canonical_json(self) -> str:
        return json.dumps(dict(sorted(self.items())), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def class_order_seed(self) -> int:
        s = self["data.class_order_seed"]
        return self["run.seed"] if s is None else s


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    return key, yaml.safe_load(raw) if raw.strip() else ""


def load_config(path: str | Path | None = None, overrides=()) -> Config:
    """Read a YAML config and apply ``key=value`` override strings."""
    values: dict = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"{path}: cannot read config ({e})") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values = flatten(tree)
    cfg = Config(values)
    cfg.update(dict(parse_override(o) for o in overrides))
    return cfg
