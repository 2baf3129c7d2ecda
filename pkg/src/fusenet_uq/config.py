"""Experiment configuration (JSON) with strict key checking.

A config has six sections; every key is optional and falls back to the
defaults below, but unknown sections or keys are rejected::

    {
      "model":    {"kind": "fusenet", "input_size": 64, "channels": 1, "num_classes": 3},
      "train":    {"epochs": 20, "batch_size": 32, "learning_rate": 0.001,
                   "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "seed": 0,
                   "patience": 5, "val_fraction": 0.2},
      "ensemble": {"num_models": 5, "passes_per_model": 10, "base_seed": 0},
      "noise":    {"grid": [0.0001, 0.001, ..., 0.6], "clip_to_unit": true, "seed": 0},
      "data":     {"synthetic": true, "n_per_class": 400, "seed": 0, "manifest": null,
                   "split": [0.6, 0.15, 0.25], "ood": "digits", "ood_count": 100},
      "output":   {"dir": "runs"}
    }

``FUSENET_SEED`` in the environment overrides ``train.seed``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fusenet_uq.data import NOISE_GRID
from fusenet_uq.models import KINDS
from fusenet_uq.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    kind: str = "fusenet"
    input_size: int = 64
    channels: int = 1
    num_classes: int = 3


@dataclass
class EnsembleSection:
    num_models: int = 5
    passes_per_model: int = 10
    base_seed: int = 0


@dataclass
class NoiseSection:
    grid: list = field(default_factory=lambda: list(NOISE_GRID))
    clip_to_unit: bool = True
    seed: int = 0


@dataclass
class DataSection:
    synthetic: bool = True
    n_per_class: int = 400
    seed: int = 0
    manifest: Optional[str] = None
    split: list = field(default_factory=lambda: [0.6, 0.15, 0.25])
    ood: str = "digits"
    ood_count: int = 100


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "model": ModelSection,
    "train": TrainConfig,
    "ensemble": EnsembleSection,
    "noise": NoiseSection,
    "data": DataSection,
    "output": OutputSection,
}

_NUMBER = (int, float)


def _type_ok(default, value, key: str) -> bool:
    if key == "manifest":
        return value is None or isinstance(value, str)
    if isinstance(value, bool) or isinstance(default, bool):
        return isinstance(value, bool) and isinstance(default, bool)
    if isinstance(default, int):
        return isinstance(value, int)
    if isinstance(default, float):
        return isinstance(value, _NUMBER)
    return isinstance(value, type(default))


def _typed(section: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    defaults = cls()
    for key, value in raw.items():
        if not _type_ok(getattr(defaults, key), value, key):
            raise ConfigError(f"{section}.{key} has the wrong type ({type(value).__name__})")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from None


def parse_config(doc: dict, env: Optional[dict] = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    parts = {name: _typed(name, cls, doc.get(name, {})) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(**parts)
    env = os.environ if env is None else env
    if env.get("FUSENET_SEED"):
        try:
            seed = int(env["FUSENET_SEED"])
        except ValueError:
            raise ConfigError("FUSENET_SEED must be an integer") from None
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    if cfg.model.kind not in KINDS:
        raise ConfigError(f"model.kind must be one of {KINDS}")
    if cfg.model.input_size < 16 or cfg.model.channels < 1 or cfg.model.num_classes < 2:
        raise ConfigError("model.input_size >= 16, channels >= 1, num_classes >= 2 required")
    if cfg.ensemble.num_models < 1 or cfg.ensemble.passes_per_model < 1:
        raise ConfigError("ensemble sizes must be >= 1")
    if any(not isinstance(s, _NUMBER) or isinstance(s, bool) or s < 0 for s in cfg.noise.grid):
        raise ConfigError("noise.grid entries must be non-negative numbers")
    split = cfg.data.split
    if len(split) != 3 or any(not isinstance(f, _NUMBER) or f <= 0 for f in split) or abs(sum(split) - 1) > 1e-9:
        raise ConfigError("data.split must be three positive fractions summing to 1")
    if cfg.data.n_per_class < 3:
        raise ConfigError("data.n_per_class must be >= 3")
    if cfg.data.ood not in ("digits", "noise"):
        raise ConfigError("data.ood must be 'digits' or 'noise'")
    if not cfg.data.synthetic and not cfg.data.manifest:
        raise ConfigError("data.manifest is required when data.synthetic is false")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)
