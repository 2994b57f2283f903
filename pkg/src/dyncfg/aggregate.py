"""Distil a stochastic guidance policy into one deterministic schedule.

Trajectories sampled from the trained policy are collapsed per decision block,
either by the plain Monte Carlo mean or by a frequency-power weighted mean that
pulls each block toward its most frequently chosen scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .env import ACTIONS, GuidanceEnv, Policy
from .errors import ContractViolation, InvalidInputError
from .schedules import GAMMA_MAX, GuidanceSchedule
from .toy_dlm import Condition


@dataclass
class TrajectorySet:
    gammas: np.ndarray                 # (N, m) guidance values per rollout and block
    temperature: float = 1.0
    seeds: List[int] = field(default_factory=list)
    steps: int = 0
    repeat: int = 1

    def __post_init__(self):
        self.gammas = np.atleast_2d(np.asarray(self.gammas, dtype=np.float64))
        if self.gammas.size and not np.isin(self.gammas, ACTIONS).all():
            raise ContractViolation("trajectory values must come from the action set")

    @property
    def size(self) -> int:
        return 0 if self.gammas.size == 0 else self.gammas.shape[0]

    @property
    def num_blocks(self) -> int:
        return self.gammas.shape[1]

    def split(self, idx) -> "TrajectorySet":
        return TrajectorySet(self.gammas[idx], self.temperature,
                             [self.seeds[i] for i in np.arange(self.size)[idx]] if self.seeds else [],
                             self.steps, self.repeat)


def sample_trajectories(policy: Policy, env: GuidanceEnv, n: int, temperature: float = 1.0,
                        seed: int = 0, conditions: Optional[Sequence[Condition]] = None) -> TrajectorySet:
    """Run ``n`` rollouts and keep only their block-level guidance choices.

    ``conditions`` (cycled) fixes the prompts so that only action sampling
    depends on ``seed``.
    """
    if n < 1:
        raise InvalidInputError("need at least one trajectory")
    if temperature < 0:
        raise InvalidInputError("temperature must be >= 0")
    rng = np.random.default_rng(seed)
    if conditions:
        conds = [conditions[i % len(conditions)] for i in range(n)]
    else:
        conds = env.sample_conditions(rng, n)
    records = env.rollout_batch(policy, conds, rng, temperature)
    return TrajectorySet(np.array([r.gammas for r in records]), temperature, [seed],
                         env.config.steps, env.config.repeat)


def _schedule(values, tset: TrajectorySet, kind: str, meta: dict) -> GuidanceSchedule:
    steps = tset.steps or tset.num_blocks * tset.repeat
    meta = {"N": tset.size, "temperature": tset.temperature, **meta}
    return GuidanceSchedule(list(values), tset.repeat, steps, kind, GAMMA_MAX, meta)


def mean_trajectory(tset: TrajectorySet) -> GuidanceSchedule:
    if tset.size == 0:
        raise InvalidInputError("empty trajectory set")
    return _schedule(tset.gammas.mean(axis=0), tset, "rl_mean", {})


def freq_weighted_values(gammas: np.ndarray, p: float) -> np.ndarray:
    """Per block: sum_i f_i^p v_i / sum_i f_i^p over the distinct values v_i seen there."""
    if p < 1:
        raise InvalidInputError(f"power p must be >= 1, got {p}")
    gammas = np.atleast_2d(gammas)
    out = np.empty(gammas.shape[1])
    for j in range(gammas.shape[1]):
        vals, counts = np.unique(gammas[:, j], return_counts=True)
        # counts / max(counts) keeps f^p representable for large p; the ratio is unchanged
        w = (counts / counts.max()) ** p
        out[j] = (w * vals).sum() / w.sum()
    return out


def freq_weighted_trajectory(tset: TrajectorySet, p: float = 2.0) -> GuidanceSchedule:
    if tset.size == 0:
        raise InvalidInputError("empty trajectory set")
    return _schedule(freq_weighted_values(tset.gammas, p), tset, "rl_freq", {"p": p})
