"""Experiment configuration: YAML/JSON files mapped onto the module dataclasses.

A config file is a nested mapping whose sections mirror the dataclasses::

    profile: desk
    seeds: [0, 1, 2]
    task: {kind: coverage, horizon: 100}
    policy: {kind: smt, num_centers: 32, embedding: {temporal_mode: exp}}
    train: {max_iterations: 3000, batch_size: 64}

Every field has a default, so an empty file is a valid config.  Unknown
keys are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .embedding import EmbeddingConfig
from .env import DynamicsConfig, FloorplanConfig
from .errors import ConfigurationError
from .policy import PROFILES, PolicyConfig
from .tasks import TaskConfig
from .training import TrainConfig

ABLATION_SUITES = ("memory_capacity", "modality_dropout", "centers", "temporal_embedding",
                   "noise_sweep")

_NESTED_TRAIN = ("task", "policy", "dynamics", "floorplan")


@dataclass
class TrainSection:
    """Scalar training fields (everything of ``TrainConfig`` but the nested configs)."""

    plan_seeds: list = field(default_factory=lambda: list(range(10)))
    validation_fraction: float = 0.2
    batch_size: int = 64
    lr: float = 5e-4
    gamma: float = 0.99
    huber_delta: float = 1.0
    buffer_capacity: int = 1000
    initial_episodes: int = 1000
    refresh_interval: int = 500
    target_sync_interval: int = 500
    validate_interval: int = 2500
    validation_episodes: int = 10
    max_iterations: int = 50000
    patience: int = 5
    temperature_start: float = 1.0
    temperature_end: float = 0.1
    eval_temperature: float = 0.5
    eval_greedy: bool = False
    pose_source: str = "true"
    pretrain_iterations: int | None = None


@dataclass
class EvalSection:
    episodes: int = 10
    base_seed: int = 10_000


@dataclass
class AblationSection:
    capacities: list = field(default_factory=lambda: [50, 100, 200, 300, 400, 500])
    modalities: list = field(default_factory=lambda: ["depth", "semantic", "pose", "action"])
    centers: list = field(default_factory=lambda: ["fps", "window", "static"])
    temporal_modes: list = field(default_factory=lambda: ["exp", "sin", "none"])
    noise_stds: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    tasks: list = field(default_factory=lambda: ["roaming", "coverage", "search"])
    retrain: bool = True


@dataclass
class ExperimentConfig:
    profile: str = "default"
    seeds: list = field(default_factory=lambda: [0])
    pretrain: bool = True
    workers: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    floorplan: FloorplanConfig = field(default_factory=FloorplanConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigurationError(f"profile: unknown {self.profile!r}; have {sorted(PROFILES)}")
        if not self.seeds:
            raise ConfigurationError("seeds: need at least one seed")
        if self.workers < 1:
            raise ConfigurationError("workers: must be at least 1")
        if self.eval.episodes < 1:
            raise ConfigurationError("eval.episodes: must be positive")
        for s in self.ablation.modalities:
            if s not in ("depth", "semantic", "pose", "action"):
                raise ConfigurationError(f"ablation.modalities: unknown modality {s!r}")
        self.train_config(self.seeds[0]).validate()

    def train_config(self, seed: int) -> TrainConfig:
        kw = dataclasses.asdict(self.train)
        return TrainConfig(task=copy.deepcopy(self.task), policy=copy.deepcopy(self.policy),
                           dynamics=copy.deepcopy(self.dynamics),
                           floorplan=copy.deepcopy(self.floorplan), seed=int(seed), **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from exc


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if tp is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def from_dict(data: dict | None) -> ExperimentConfig:
    """Resolve a raw mapping; the profile fixes model widths unless overridden."""
    data = copy.deepcopy(data or {})
    profile = data.get("profile", "default")
    if profile not in PROFILES:
        raise ConfigurationError(f"profile: unknown {profile!r}; have {sorted(PROFILES)}")
    policy = data.get("policy") or {}
    if not isinstance(policy, dict):
        raise ConfigurationError("policy: expected a mapping")
    dims = dict(PROFILES[profile])
    dims.update({k: v for k, v in policy.items() if k in dims})
    policy.update(dims)
    emb = policy.get("embedding") or {}
    if not isinstance(emb, dict):
        raise ConfigurationError("policy.embedding: expected a mapping")
    emb.setdefault("d_x", dims["d_x"])
    policy["embedding"] = emb
    data["policy"] = policy
    cfg = _build(ExperimentConfig, data, "")
    try:
        cfg.validate()
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a ``.yaml``/``.yml``/``.json`` file (``None`` gives all defaults)."""
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    text = p.read_text()
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"{p}: cannot parse: {exc}") from exc
    return from_dict(data)


__all__ = ["ABLATION_SUITES", "AblationSection", "EvalSection", "ExperimentConfig",
           "TrainSection", "from_dict", "load_config", "EmbeddingConfig"]
