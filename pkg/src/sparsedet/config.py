"""Run configuration: flat key=value INI sections with strict parsing.

Every field has a default, so an empty file is a valid config; unknown
sections or keys are rejected outright. ``to_text`` emits a canonical
serialization whose hash is embedded in logs and checkpoints.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .data import DatasetSpec
from .exceptions import ConfigError
from .model import ModelConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    num_val_images: int = 100
    learning_rate: float = 2.5e-5
    weight_decay: float = 1e-4
    epochs: int = 36
    batch_size: int = 16
    lr_decay_epochs: tuple[int, ...] = (27, 33)
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    out_dir: str = "runs/default"
    flip: bool = True

    def validate(self) -> None:
        self.dataset.validate()
        # The model always sees the dataset's class count.
        self.model.num_classes = self.dataset.num_classes
        self.model.validate()
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 < self.focal_alpha < 1.0) or self.focal_gamma < 0:
            raise ConfigError("focal_alpha must be in (0,1) and focal_gamma >= 0")
        if self.num_val_images < 0:
            raise ConfigError("num_val_images must be non-negative")

    def loss_params(self) -> dict:
        return {
            "lambda_cls": self.lambda_cls,
            "lambda_l1": self.lambda_l1,
            "lambda_giou": self.lambda_giou,
            "alpha": self.focal_alpha,
            "gamma": self.focal_gamma,
        }


# section -> key -> (getter from RunConfig, setter kwargs target, type tag)
_MODEL_KEYS = {
    "num_proposals": int,
    "feature_dim": int,
    "roi_size": int,
    "num_stages": int,
    "num_attention_heads": int,
    "init_scheme": str,
    "interaction": str,
}
_DATASET_KEYS = {
    "num_images": int,
    "num_val_images": int,  # stored on RunConfig, not DatasetSpec
    "image_size": int,
    "num_classes": int,
    "max_objects": int,
    "crowd_mode": bool,
    "seed": int,
}
_OPTIMIZER_KEYS = {
    "learning_rate": float,
    "weight_decay": float,
    "epochs": int,
    "batch_size": int,
    "lr_decay_epochs": "int_tuple",
}
_LOSS_KEYS = {
    "lambda_cls": float,
    "lambda_l1": float,
    "lambda_giou": float,
    "focal_alpha": float,
    "focal_gamma": float,
}
_RUN_KEYS = {"seed": int, "out_dir": str, "flip": bool}
_SECTIONS = {
    "model": _MODEL_KEYS,
    "dataset": _DATASET_KEYS,
    "optimizer": _OPTIMIZER_KEYS,
    "loss": _LOSS_KEYS,
    "run": _RUN_KEYS,
}


def _parse_value(raw: str, kind, where: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int_tuple":
            if not raw:
                return ()
            return tuple(int(part) for part in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {where}: {e}") from e


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        keys = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            value = _parse_value(raw, keys[key], f"[{section}] {key}")
            if section == "model":
                setattr(cfg.model, key, value)
            elif section == "dataset":
                if key == "num_val_images":
                    cfg.num_val_images = value
                else:
                    setattr(cfg.dataset, key, value)
            else:
                setattr(cfg, key, value)
    cfg.validate()
    return cfg


def config_from_file(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_text(text)


def config_to_text(cfg: RunConfig) -> str:
    """Canonical serialization: fixed section and key order."""
    out = io.StringIO()
    values = {
        "model": {k: getattr(cfg.model, k) for k in _MODEL_KEYS},
        "dataset": {
            k: (cfg.num_val_images if k == "num_val_images" else getattr(cfg.dataset, k))
            for k in _DATASET_KEYS
        },
        "optimizer": {k: getattr(cfg, k) for k in _OPTIMIZER_KEYS},
        "loss": {k: getattr(cfg, k) for k in _LOSS_KEYS},
        "run": {k: getattr(cfg, k) for k in _RUN_KEYS},
    }
    for section, keys in values.items():
        out.write(f"[{section}]\n")
        for key, value in keys.items():
            out.write(f"{key} = {_format_value(value)}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:12]


def toy_config(**overrides) -> RunConfig:
    """Small configuration exercised by the gradient-check suite."""
    cfg = RunConfig(
        model=ModelConfig(
            num_proposals=3,
            feature_dim=8,
            roi_size=2,
            num_stages=2,
            num_classes=3,
            num_attention_heads=4,
            init_scheme="random",
        ),
        dataset=DatasetSpec(num_images=4, image_size=16, num_classes=3, max_objects=2),
        num_val_images=0,
        batch_size=1,
        epochs=1,
    )
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


__all__ = [
    "RunConfig",
    "config_from_text",
    "config_from_file",
    "config_to_text",
    "config_hash",
    "toy_config",
    "replace",
]
