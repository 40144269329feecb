"""Experiment configuration: typed sections, JSON round-trip, validation.

An empty config file means "all defaults".  Unknown keys are rejected with
the offending key named, value types are checked, and cross-section
consistency (clip/crop sizes, feasibility of overlap placement, loss
weights vs. enabled augmentations) is validated before anything runs.
"""

import dataclasses
import json
import os
import typing

from .augment import AugmentConfig, PhotometricParams
from .contrastive import FrameworkConfig
from .errors import ConfigError
from .evaluate import EvalConfig
from .model import EncoderConfig
from .synthdata import DatasetSpec
from .training import LossWeights, TrainConfig


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = dataclasses.field(default_factory=DatasetSpec)
    augment: AugmentConfig = dataclasses.field(default_factory=AugmentConfig)
    model: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    framework: FrameworkConfig = dataclasses.field(default_factory=FrameworkConfig)
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    output_dir: str = "runs/default"


def _coerce(hint, value, path: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return _dataclass_from_dict(hint, value, path)
    if origin is typing.Union:  # e.g. "int | None"
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        elem = args[0] if args else float
        return tuple(_coerce(elem, v, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _dataclass_from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")
    kwargs = {
        name: _coerce(hints[name], value, f"{path}.{name}" if path else name)
        for name, value in data.items()
    }
    return cls(**kwargs)


def config_from_dict(data: dict) -> "ExperimentConfig":
    return _dataclass_from_dict(ExperimentConfig, data, "")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    cfg.dataset.validate(cfg.augment.clip_length)
    cfg.augment.validate(cfg.dataset.height, cfg.dataset.width, cfg.dataset.num_frames)
    cfg.model.validate()
    cfg.weights.validate()
    cfg.train.validate()
    cfg.eval.validate()
    cfg.framework.validate(batch_size=cfg.train.batch_size)
    if cfg.model.clip_length != cfg.augment.clip_length:
        raise ConfigError(
            f"model.clip_length {cfg.model.clip_length} != augment.clip_length {cfg.augment.clip_length}"
        )
    if cfg.model.crop_size != cfg.augment.crop_size:
        raise ConfigError(
            f"model.crop_size {cfg.model.crop_size} != augment.crop_size {cfg.augment.crop_size}"
        )
    if cfg.weights.lambda_pcls > 0 and not cfg.augment.enable_playback:
        raise ConfigError("weights.lambda_pcls > 0 requires augment.enable_playback")
    if cfg.weights.lambda_rcls > 0 and not cfg.augment.enable_rotation:
        raise ConfigError("weights.lambda_rcls > 0 requires augment.enable_rotation")
    if cfg.weights.lambda_ocls > 0 and not cfg.augment.enable_stor:
        raise ConfigError("weights.lambda_ocls > 0 requires augment.enable_stor")
    if cfg.dataset.num_frames < cfg.model.clip_length:
        raise ConfigError("videos are shorter than the evaluation clip length")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read().strip()
    data = json.loads(text) if text else {}
    return validate_config(config_from_dict(data))


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_json(cfg) + "\n")


def override_config(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply nested {'section.field': value} overrides, returning a new config."""
    data = config_to_dict(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node:
                raise ConfigError(f"unknown override section {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown override key {dotted!r}")
        node[parts[-1]] = value
    return validate_config(config_from_dict(data))
