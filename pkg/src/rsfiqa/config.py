"""Run configuration, loadable from TOML with per-key overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .description import DIMENSIONS
from .errors import ConfigError
from .semantic_encoder import PROMPT_FIELDS


@dataclass
class RunConfig:
    # geometry
    height: int = 64
    width: int = 64
    levels: int = 4
    backbone_channels: tuple[int, ...] | None = None
    L: int = 5
    dim: int = 32
    guide_dim: int = 16
    text_dim: int = 32
    max_tokens: int = 32
    vocab_size: int = 4096
    hash_seed: int = 0
    lambda_init: float = 0.1
    train_lambda: bool = True
    heads: int = 1
    mlp_hidden: int = 64
    # optimisation
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 1e-5
    t_max: int = 50
    eta_min: float = 0.0
    epochs: int = 200
    patience: int = 20
    target_train_mse: float | None = None
    augment_flips: bool = False
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    # providers
    segmenter: str = "fallback"
    describer: str = "heuristic"
    text_encoder: str = "hashed"
    max_in_flight: int = 4
    # ablation toggles
    use_mhf: bool = True
    use_descriptions: bool = True
    use_rsa_bias: bool = True
    dimensions: tuple[str, ...] = field(default_factory=lambda: tuple(d.value for d in DIMENSIONS))
    prompt_fields: tuple[str, ...] = PROMPT_FIELDS

    def __post_init__(self):
        for name in ("backbone_channels", "split_ratios", "dimensions", "prompt_fields"):
            value = getattr(self, name)
            if isinstance(value, list):
                setattr(self, name, tuple(value))
        if self.L < 2:
            raise ConfigError(f"L must be at least 2, got {self.L}")
        if self.levels < 2:
            raise ConfigError(f"need at least two backbone levels, got {self.levels}")
        if self.backbone_channels is not None and len(self.backbone_channels) != self.levels:
            raise ConfigError("backbone_channels must list one width per level")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios):
            raise ConfigError(f"split_ratios must be three non-negative numbers, got {self.split_ratios}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split_ratios must sum to 1, got {sum(self.split_ratios)}")
        bad = set(self.dimensions) - {d.value for d in DIMENSIONS}
        if bad:
            raise ConfigError(f"unknown distortion dimensions {sorted(bad)}")
        bad = set(self.prompt_fields) - set(PROMPT_FIELDS)
        if bad:
            raise ConfigError(f"unknown prompt fields {sorted(bad)}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.lambda_init < 0:
            raise ConfigError("lambda_init must be non-negative")

    @property
    def eta_max(self) -> float:
        return self.lr

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> RunConfig:
        data: dict[str, Any] = {}
        if path is not None:
            try:
                with open(path, "rb") as fh:
                    data = tomli.load(fh)
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"bad TOML in {path}: {e}") from e
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)


def config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(RunConfig))
