"""Run configuration: one JSON document with a block per module.

Every tunable lives in one of the dataclasses below; unknown keys are
rejected with their dotted path.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .augment import AugmentConfig
from .loss import LossConfig
from .nn.train import TrainConfig
from .nn.unet import UNetConfig
from .phantom import PhantomSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    target_spacing: Optional[tuple[float, float, float]] = None  # None keeps native spacing
    low_percentile: float = 0.5
    high_percentile: float = 99.5
    foreground: str = "label"  # label | above_low
    per_case: bool = False

    def __post_init__(self):
        if not 0 <= self.low_percentile <= self.high_percentile <= 100:
            raise ValueError("need 0 <= low_percentile <= high_percentile <= 100")
        if self.foreground not in ("label", "above_low"):
            raise ValueError(f"foreground must be 'label' or 'above_low', got {self.foreground!r}")


@dataclass
class InferConfig:
    patch_shape: tuple[int, int, int] = (32, 32, 32)
    tta: str = "mirror"  # mirror | none
    mirror_axes: tuple[int, ...] = (0, 1, 2)
    noise_std: float = 0.01
    noise_repeats: int = 0
    sigma_scale: float = 0.125
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.tta not in ("mirror", "none"):
            raise ValueError(f"tta must be 'mirror' or 'none', got {self.tta!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PostprocessConfig:
    connectivity: int = 26
    second_kidney_ratio: float = 0.1

    def __post_init__(self):
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")


BLOCKS = {
    "preprocess": PreprocessConfig,
    "augment": AugmentConfig,
    "net": UNetConfig,
    "loss": LossConfig,
    "infer": InferConfig,
    "postprocess": PostprocessConfig,
    "train": TrainConfig,
    "phantom": PhantomSpec,
}


@dataclass
class Config:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    net: UNetConfig = field(default_factory=UNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build_block(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    try:
        return cls(**{k: _tuplify(v) for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(raw: dict) -> Config:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "schema_version" not in raw:
        raise ConfigError("missing required key 'schema_version'")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw['schema_version']!r} "
                          f"(expected {SCHEMA_VERSION})")
    for key in raw:
        if key != "schema_version" and key not in BLOCKS:
            raise ConfigError(f"unknown config key '{key}'")
    blocks = {name: _build_block(name, cls, raw.get(name, {})) for name, cls in BLOCKS.items()}
    return Config(**blocks)


def load(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    return from_dict(raw)


PROFILES = {
    "desk": {
        "net": {"levels": 3, "base_channels": 8, "paper_profile": False},
        "train": {"patch_shape": (32, 32, 32), "batch_size": 2, "lr": 3e-4},
        "infer": {"patch_shape": (32, 32, 32)},
    },
    "paper": {
        "net": {"levels": 6, "base_channels": 30, "paper_profile": True},
        "train": {"patch_shape": (48, 192, 192), "batch_size": 8, "lr": 3e-4,
                  "iterations_per_epoch": 250},
        "infer": {"patch_shape": (48, 192, 192)},
    },
}


def apply_profile(cfg: Config, profile: str) -> Config:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    updates = {}
    for block, values in PROFILES[profile].items():
        updates[block] = dataclasses.replace(getattr(cfg, block), **values)
    return dataclasses.replace(cfg, **updates)
