"""The single JSON run configuration used by the command-line tool.

Every section is optional and falls back to the library defaults; unknown
keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augmentation import AugConfig
from .dataset import GeneratorParams
from .lbm import LbmConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    n_samples: int = 700
    splits: dict = field(default_factory=lambda: {"train": 5 / 7, "val": 1 / 7, "test": 1 / 7})
    max_skipped_fraction: float = 0.5


@dataclass(frozen=True)
class EvalSection:
    bootstrap: int = 0
    alpha: float = 0.05
    mc_dropout: int = 0
    stratify_bins: int = 0
    tta: bool = False
    split: str = "test"


@dataclass(frozen=True)
class Seeds:
    data: int = 2024
    train: int = 0
    eval: int = 42


@dataclass(frozen=True)
class Paths:
    data: str = "data"
    runs: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    data: DataSection = field(default_factory=DataSection)
    lbm: LbmConfig = field(default_factory=LbmConfig)
    augmentation: AugConfig | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    training: dict = field(default_factory=dict)  # "scale" plus per-phase overrides
    evaluation: EvalSection = field(default_factory=EvalSection)
    seeds: Seeds = field(default_factory=Seeds)
    paths: Paths = field(default_factory=Paths)

    def train_config(self, phase: int, epochs: int | None = None) -> TrainConfig:
        scale = self.training.get("scale", "desk")
        overrides = dict(self.training.get(str(phase), {}))
        if epochs is not None:
            overrides["epochs"] = epochs
        return TrainConfig.for_phase(phase, scale=scale, **overrides)

    def aug_config(self, phase: int) -> AugConfig:
        if self.augmentation is not None:
            return self.augmentation
        return AugConfig.d4_only() if phase == 2 else AugConfig()


_SECTIONS = {"generator": GeneratorParams, "data": DataSection, "lbm": LbmConfig,
             "augmentation": AugConfig, "model": ModelConfig, "evaluation": EvalSection,
             "seeds": Seeds, "paths": Paths}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"phase"}


def _section(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def _training(raw):
    if not isinstance(raw, dict):
        raise ConfigError("training must be an object")
    for key, val in raw.items():
        if key == "scale":
            if val not in ("desk", "full"):
                raise ConfigError("training.scale must be 'desk' or 'full'")
        elif key in ("2", "3", "4"):
            if not isinstance(val, dict):
                raise ConfigError(f"training.{key} must be an object")
            unknown = sorted(set(val) - _TRAIN_FIELDS)
            if unknown:
                raise ConfigError(f"unknown key(s) in training.{key}: {', '.join(unknown)}")
        else:
            raise ConfigError(f"unknown key in training: {key}")
    return dict(raw)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"training"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(cls, raw[name], name) for name, cls in _SECTIONS.items() if name in raw}
    if "training" in raw:
        kwargs["training"] = _training(raw["training"])
    cfg = RunConfig(**kwargs)
    for phase in (2, 3, 4):
        try:
            cfg.train_config(phase)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training.{phase}: {exc}") from None
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        val = getattr(cfg, name)
        if val is not None:
            out[name] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in dataclasses.asdict(val).items()}
    out["training"] = dict(cfg.training)
    return out
