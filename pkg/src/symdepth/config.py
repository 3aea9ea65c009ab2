"""JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .losses import LossConfig
from .model import ConfigError, ModelConfig


@dataclass(frozen=True)
class AugmentConfig:
    p_apply: float = 0.5
    D_min: float | None = None  # None: take the bound from the manifest
    D_max: float | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 200
    batch_size: int = 4

    def validate(self) -> None:
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        self.model.validate()
        a = self.augmentation
        if not 0.0 <= a.p_apply <= 1.0:
            raise ConfigError(f"augmentation.p_apply must lie in [0, 1], got {a.p_apply}")
        for name in ("D_min", "D_max"):
            v = getattr(a, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ConfigError(f"augmentation.{name} must be positive, got {v}")
        if a.D_min is not None and a.D_max is not None and not a.D_min < a.D_max:
            raise ConfigError(f"augmentation.D_min {a.D_min} must be below D_max {a.D_max}")
        o = self.optimizer
        if not (math.isfinite(o.lr) and o.lr > 0):
            raise ConfigError(f"optimizer.lr must be positive, got {o.lr}")
        if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        if o.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be non-negative")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        data = dict(data)
        _reject_unknown(cls, data, "config")
        nested = {
            "model": ModelConfig,
            "loss": LossConfig,
            "augmentation": AugmentConfig,
            "optimizer": OptimizerConfig,
        }
        for key, kind in nested.items():
            if key in data:
                section = data[key]
                if not isinstance(section, Mapping):
                    raise ConfigError(f"{key} must be a JSON object")
                _reject_unknown(kind, section, key)
                try:
                    data[key] = kind(**section)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from None
        try:
            cfg = cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _reject_unknown(kind, data: Mapping, where: str) -> None:
    known = {f.name for f in fields(kind)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
