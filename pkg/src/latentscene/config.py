"""Run configuration: one YAML file drives the whole pipeline.

Unknown keys are rejected so typos fail loudly, and every command logs the
fully resolved configuration it executed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from . import nets, scenes
from .errors import ConfigError
from .losses import AnnealSchedule, LossWeights
from .train import TrainConfig


@dataclass(frozen=True)
class SceneSection:
    resolution: int = 64
    horizon_y: float = 0.42
    lane_count: int = 3
    dash_period: int = 16
    max_other_cars: int = 3
    sequence_length: int = 16
    ego_speed: int = 4
    sequence_count: int = 24
    conditions: tuple = scenes.CONDITIONS

    def base_config(self, seed):
        return scenes.SceneConfig(
            resolution=self.resolution, horizon_y=self.horizon_y,
            lane_count=self.lane_count, dash_period=self.dash_period,
            max_other_cars=self.max_other_cars, condition=self.conditions[0],
            seed=seed, sequence_length=self.sequence_length,
            ego_speed=self.ego_speed).validate()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    preset: str = "desk"
    scene: SceneSection = field(default_factory=SceneSection)
    layout: nets.LatentLayout = field(default_factory=lambda: nets.LatentLayout(32, 8, 8))
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)

    def validate(self):
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.preset not in ("desk", "paper"):
            raise ConfigError(f"preset must be 'desk' or 'paper', got {self.preset!r}")
        self.layout.validate()
        self.scene.base_config(self.seed)
        self.resolved_train().validate()
        return self

    def resolved_train(self):
        """Training config with the shared seed, weights and schedule folded in."""
        return replace(self.train, seed=self.seed, weights=self.weights,
                       anneal=self.anneal)

    def architecture(self):
        if self.preset == "paper":
            return nets.paper_arch()
        return nets.desk_arch(self.scene.resolution, self.layout)


_SECTION_TYPES = {
    "scene": SceneSection,
    "layout": nets.LatentLayout,
    "train": TrainConfig,
    "weights": LossWeights,
    "anneal": AnnealSchedule,
}


# Keys resolved from the top level rather than set inside [train].
_TRAIN_EXCLUDED = {"weights", "anneal", "seed"}


def _build_section(cls, data, context):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    if cls is TrainConfig:
        allowed -= _TRAIN_EXCLUDED
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}; allowed keys are"
                          f" {sorted(allowed)}")
    coerced = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except TypeError as err:
        raise ConfigError(f"{context}: {err}") from None


def run_config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {"seed", "threads", "preset"} | set(_SECTION_TYPES)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}; allowed keys are"
                          f" {sorted(allowed)}")
    kwargs = {}
    for key in ("seed", "threads", "preset"):
        if key in data:
            kwargs[key] = data[key]
    for key, cls in _SECTION_TYPES.items():
        if key in data:
            kwargs[key] = _build_section(cls, data[key], key)
    return RunConfig(**kwargs).validate()


def load_run_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML ({err})") from None
    return run_config_from_dict(data or {})


def resolved_dict(cfg):
    """Plain-dict view of a config, for logging the executed settings."""
    out = asdict(cfg)
    out["scene"]["conditions"] = list(out["scene"]["conditions"])
    out["train"]["fractions"] = list(out["train"]["fractions"])
    for key in _TRAIN_EXCLUDED:
        out["train"].pop(key, None)
    return out


def dump_resolved(cfg, stream):
    yaml.safe_dump(resolved_dict(cfg), stream, sort_keys=True)
