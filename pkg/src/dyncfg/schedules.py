"""Heuristic guidance curves, block-level schedules and a curve grid search."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractViolation, InvalidConfigError, InvalidInputError

HEURISTICS = ("fixed", "linear_increase", "linear_decrease", "cosine_increase",
              "cosine_decrease", "beta", "inverted_beta")
GAMMA_MAX = 3.0
FIXED_VALUE = 1.5


@dataclass(frozen=True)
class HeuristicKind:
    name: str
    gamma_max: float = GAMMA_MAX
    fixed_value: float = FIXED_VALUE

    def __post_init__(self):
        if self.name not in HEURISTICS:
            raise InvalidConfigError(f"unknown heuristic {self.name!r}")
        if self.gamma_max <= 0:
            raise InvalidConfigError("gamma_max must be positive")
        if not 0 <= self.fixed_value <= self.gamma_max:
            raise InvalidConfigError("fixed_value must lie in [0, gamma_max]")


def eval_schedule(kind: HeuristicKind, s: float) -> float:
    """Guidance scale of a heuristic curve at sampling progress s in [0, 1]."""
    if not 0.0 <= s <= 1.0:
        raise InvalidInputError(f"progress {s} outside [0, 1]")
    g = kind.gamma_max
    name = kind.name
    if name == "fixed":
        return kind.fixed_value
    # decreasing variants are complements of the increasing ones, which keeps
    # each pair summing to gamma_max without rounding drift
    if name.startswith("linear"):
        up = g * s
    elif name.startswith("cosine"):
        up = g * (1.0 - math.cos(math.pi * s)) / 2.0
    else:
        # Beta(2,2) density 6s(1-s) rescaled so the midpoint peak equals gamma_max
        up = g * min(1.0, 4.0 * s * (1.0 - s))
    return up if name in ("linear_increase", "cosine_increase", "beta") else g - up


def num_decisions(steps: int, repeat: int) -> int:
    if steps < 1 or repeat < 1:
        raise InvalidConfigError("steps and repeat must be >= 1")
    return math.ceil(steps / repeat)


def repeat_actions(block_values: Sequence[float], repeat: int, steps: int) -> List[float]:
    """Expand one value per decision block into one value per step.

    Step k (1-based, execution order) takes block ceil(k / repeat); the last
    block is truncated so exactly ``steps`` values come out.
    """
    m = num_decisions(steps, repeat)
    if len(block_values) != m:
        raise ContractViolation(f"expected {m} block values for K={steps}, n={repeat}; got {len(block_values)}")
    return [float(block_values[(k - 1) // repeat]) for k in range(1, steps + 1)]


@dataclass
class GuidanceSchedule:
    values: List[float]
    repeat: int
    steps: int
    kind: str = "custom"
    gamma_max: float = GAMMA_MAX
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = [float(v) for v in self.values]
        if len(self.values) != num_decisions(self.steps, self.repeat):
            raise InvalidConfigError("schedule length must equal ceil(K / n)")
        if any(not (0.0 <= v <= self.gamma_max + 1e-12) for v in self.values):
            raise InvalidConfigError("schedule values must lie in [0, gamma_max]")

    @property
    def num_blocks(self) -> int:
        return len(self.values)

    def per_step(self) -> List[float]:
        return repeat_actions(self.values, self.repeat, self.steps)

    def mean_gamma(self) -> float:
        return float(np.mean(self.per_step()))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": self.values, "K": self.steps, "n": self.repeat,
                "gamma_max": self.gamma_max, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceSchedule":
        return cls(d["values"], d["n"], d["K"], d.get("kind", "custom"),
                   d.get("gamma_max", GAMMA_MAX), dict(d.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "GuidanceSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


def materialize(kind: HeuristicKind, steps: int, repeat: int = 1) -> GuidanceSchedule:
    """Sample a heuristic at the decision-block midpoints (j - 0.5) / m."""
    m = num_decisions(steps, repeat)
    values = [eval_schedule(kind, (j - 0.5) / m) for j in range(1, m + 1)]
    return GuidanceSchedule(values, repeat, steps, kind.name, kind.gamma_max)


def constant_schedule(gamma: float, steps: int, repeat: int = 1, gamma_max: float = GAMMA_MAX) -> GuidanceSchedule:
    m = num_decisions(steps, repeat)
    return GuidanceSchedule([gamma] * m, repeat, steps, f"fixed_{gamma:g}", gamma_max, {"gamma": gamma})


def grid_search_curves(family: Sequence[GuidanceSchedule],
                       reward_eval: Callable[[GuidanceSchedule], float],
                       budget: Optional[int] = None) -> GuidanceSchedule:
    """Best schedule among the first ``budget`` candidates; ties go to the lower mean scale."""
    if not family:
        raise InvalidInputError("empty candidate family")
    if budget is not None and budget < 1:
        raise InvalidInputError("budget must be >= 1")
    best, best_key = None, None
    for cand in list(family)[:budget]:
        key = (reward_eval(cand), -cand.mean_gamma())
        if best_key is None or key > best_key:
            best, best_key = cand, key
    return best
