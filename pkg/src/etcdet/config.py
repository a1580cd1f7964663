"""Project configuration: one TOML file bundling every pipeline stage's
settings, with CLI flags overriding file values. Unknown keys are rejected."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentConfig
from .detector.network import MiniSSDConfig
from .detector.priors import PriorConfig
from .detector.train import TrainConfig
from .tracking import TrackerConfig


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    interpolation: str = "all_point"  # or "voc2007"
    score_threshold: float = 0.05
    nms_iou: float = 0.45
    top_k: int = 200


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8008


@dataclass(frozen=True)
class ProjectConfig:
    data_dir: Path = Path("data")
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "tracker": TrackerConfig,
    "augment": AugmentConfig,
    "priors": PriorConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "service": ServiceConfig,
}

# TOML has no tuple type; these fields arrive as lists
_TUPLE_FIELDS = {
    "contrast_range",
    "crop_min_iou",
    "crop_scale_range",
    "crop_aspect_range",
    "feature_map_sizes",
    "scales",
    "aspect_ratios",
}


def _build_section(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


def load_project_config(path: str | Path) -> ProjectConfig:
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    top_known = {"data_dir"} | set(_SECTIONS)
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"config has unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    if "data_dir" in raw:
        kwargs["data_dir"] = Path(raw["data_dir"])
    for section, cls in _SECTIONS.items():
        if section in raw:
            kwargs[section] = _build_section(cls, raw[section], section)
    return ProjectConfig(**kwargs)


def model_config_from(project: ProjectConfig, seed: int | None = None) -> MiniSSDConfig:
    return MiniSSDConfig(
        priors=project.priors,
        seed=project.train.seed if seed is None else seed,
    )
