"""Experiment configuration: nested dataclasses loaded from / dumped to YAML."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .errors import InvalidConfigError
from .ppo import PpoConfig
from .rewards import TASKS, RewardWeights
from .sampler import SamplerConfig


@dataclass(frozen=True)
class ModelConfig:
    seed: int = 0
    vocab_size: int = 64
    mix_alpha: float = 0.7
    boost_delta: float = 2.0


@dataclass(frozen=True)
class EnvSection:
    repeat: int = 1
    num_keywords: int = 10
    source_length: Tuple[int, int] = (12, 20)


@dataclass(frozen=True)
class WeightsSection:
    lambda_ctrl: float
    lambda_ppl: float
    lambda_semantic: float
    ppl_max: float


@dataclass(frozen=True)
class AggregationConfig:
    num_trajectories: int = 200
    temperature: float = 1.0
    power: float = 2.0
    seed: int = 12345

    def __post_init__(self):
        if self.num_trajectories < 1:
            raise InvalidConfigError("num_trajectories must be >= 1")
        if self.temperature < 0:
            raise InvalidConfigError("temperature must be >= 0")
        if self.power < 1:
            raise InvalidConfigError("power must be >= 1")


@dataclass(frozen=True)
class SeedConfig:
    train: int = 0
    train_prompt_start: int = 0
    train_prompt_count: int = 3000
    eval_prompt_start: int = 1_000_000
    eval_episodes: int = 200

    def __post_init__(self):
        if self.train_prompt_count < 1 or self.eval_episodes < 1:
            raise InvalidConfigError("prompt counts must be >= 1")
        a = range(self.train_prompt_start, self.train_prompt_start + self.train_prompt_count)
        b = range(self.eval_prompt_start, self.eval_prompt_start + self.eval_episodes)
        if a.start < b.stop and b.start < a.stop:
            raise InvalidConfigError("train and eval prompt seeds must be disjoint")

    @property
    def train_prompts(self) -> range:
        return range(self.train_prompt_start, self.train_prompt_start + self.train_prompt_count)

    @property
    def eval_prompts(self) -> range:
        return range(self.eval_prompt_start, self.eval_prompt_start + self.eval_episodes)


DEFAULT_PPO = PpoConfig(learning_rate=1e-3, episodes_per_iteration=64, minibatch_size=256,
                        iterations=300)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "keywords"
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    env: EnvSection = field(default_factory=EnvSection)
    ppo: PpoConfig = DEFAULT_PPO
    weights: Optional[WeightsSection] = None
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    gamma_max: float = 3.0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.gamma_max <= 0:
            raise InvalidConfigError("gamma_max must be positive")

    def reward_weights(self) -> RewardWeights:
        if self.weights is None:
            return RewardWeights.for_task(self.task)
        return RewardWeights(**dataclasses.asdict(self.weights))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, data or {}, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise InvalidConfigError("config root must be a mapping")
        return cls.from_dict(data or {})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise InvalidConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise InvalidConfigError(f"{where}: expected a list of {len(args)} values")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise InvalidConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Dict[str, Any], where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise InvalidConfigError(f"{where}: unknown keys {sorted(unknown)}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    kwargs = {}
    for k, v in data.items():
        base = defaults.get(k)
        # a section whose experiment default differs from the bare class default
        # (e.g. the tuned PPO settings) is overlaid, not rebuilt from scratch
        if dataclasses.is_dataclass(base) and isinstance(v, dict) and base != type(base)():
            v = {**_plain(dataclasses.asdict(base)), **v}
        kwargs[k] = _coerce(hints[k], v, f"{where}.{k}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfigError(f"{where}: {exc}") from exc
