"""Run configuration: one JSON document holding every tunable of a run.

Defaults reproduce the full-data training settings; ``configs/`` ships a
desk-scale override for the synthetic corpus.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .augment import AugmentPolicy
from .infer import TtaConfig, default_tta_policy
from .models import (BACKBONE_KINDS, DEFAULT_BACKBONES, BackboneConfig, ConfigError, EnsembleConfig,
                     StudentConfig)
from .train import TrainConfig


def default_run_config() -> dict:
    return {
        "seed": 0,
        "data": {"path": None},
        "augment": AugmentPolicy().to_dict(),
        "backbones": {k: DEFAULT_BACKBONES[k].to_dict() for k in BACKBONE_KINDS},
        "ensemble": {"head_hidden": 256, "dropout_rate": 0.3, "finetune": False},
        "student": {"stage_widths": [8, 16, 32, 32], "blocks_per_stage": [1, 1, 1, 1],
                    "max_param_ratio": 0.10, "hard_weight": 0.0, "epochs": None},
        "train": TrainConfig().to_dict(),
        "tta": {"steps": 10, "seed": 0, "policy": default_tta_policy().to_dict()},
    }


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{prefix}{key}.")
        else:
            base[key] = value
    return base


def parse_override(item: str):
    """``a.b.c=value`` -> (["a", "b", "c"], value); values parse as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def resolve(config_path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    cfg = default_run_config()
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {config_path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
        _merge(cfg, loaded)
    for item in overrides:
        keys, value = parse_override(item)
        nested = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested)
    validate(cfg)
    return cfg


def _build(section: str, factory, values):
    try:
        return factory(values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def validate(cfg: dict) -> None:
    """Instantiate every typed section so a bad field fails with its name."""
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: must be an integer")
    augment_policy(cfg)
    train_config(cfg)
    tta_config(cfg)
    for kind in cfg["backbones"]:
        b = backbone_config(cfg, kind)
        try:
            b.validate()
        except ConfigError as exc:
            raise ConfigError(f"backbones.{kind}: {exc}") from None
    ensemble_config(cfg).validate()
    student_config(cfg)
    distill_train_config(cfg)


def augment_policy(cfg: dict) -> AugmentPolicy:
    return _build("augment", lambda d: AugmentPolicy(**d), cfg["augment"])


def train_config(cfg: dict) -> TrainConfig:
    return _build("train", TrainConfig.from_dict, {**cfg["train"], "seed": cfg["seed"]})


def distill_train_config(cfg: dict) -> TrainConfig:
    """Training settings for distillation; ``student.epochs`` (if set) replaces ``train.epochs``."""
    epochs = cfg["student"].get("epochs")
    base = train_config(cfg)
    if epochs is None:
        return base
    if not isinstance(epochs, int) or isinstance(epochs, bool):
        raise ConfigError("student.epochs: must be an integer or null")
    return _build("student.epochs", lambda d: base.replace(epochs=d), epochs)


def tta_config(cfg: dict, steps: int | None = None) -> TtaConfig:
    t = cfg["tta"]
    return _build("tta", lambda d: TtaConfig(steps if steps is not None else d["steps"],
                                             AugmentPolicy(**d["policy"]), d["seed"]), t)


def backbone_config(cfg: dict, kind: str) -> BackboneConfig:
    if kind not in cfg["backbones"]:
        raise ConfigError(f"backbones: no entry for kind {kind!r}")
    return _build(f"backbones.{kind}", BackboneConfig.from_dict, cfg["backbones"][kind])


def ensemble_config(cfg: dict) -> EnsembleConfig:
    e = cfg["ensemble"]
    return _build("ensemble", lambda d: EnsembleConfig(
        tuple(backbone_config(cfg, k) for k in cfg["backbones"]), d["head_hidden"], d["dropout_rate"]), e)


def student_config(cfg: dict) -> StudentConfig:
    s = cfg["student"]
    return _build("student", lambda d: StudentConfig(tuple(d["stage_widths"]), tuple(d["blocks_per_stage"]),
                                                     d["max_param_ratio"]), s)


def freeze(cfg: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(copy.deepcopy(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
