"""Guidance selection as an episodic MDP over the reverse diffusion loop.

One episode is one full generation. The policy picks a guidance scale once per
decision block of ``repeat`` consecutive steps; the only non-zero reward is the
terminal task reward of the finished output.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, InvalidConfigError
from .rewards import (RewardBreakdown, RewardWeights, TASKS, keyword_coverage, output_length,
                      sentiment_score, terminal_reward)
from .sampler import (BatchState, DiffusionState, EncodedConditions, SamplerConfig,
                      batch_active_cols, batch_generate, batch_initial_state, batch_predict,
                      batch_run_step, encode_conditions, present_tokens)
from .schedules import GAMMA_MAX, GuidanceSchedule, num_decisions
from .toy_dlm import NEGATIVE, POSITIVE, Condition, ToyModel, sample_sequence

ACTIONS = np.arange(13) * 0.25
NUM_FEATURES = 5


def action_to_gamma(index: int) -> float:
    if not 0 <= index < len(ACTIONS):
        raise ContractViolation(f"action index {index} outside [0, {len(ACTIONS) - 1}]")
    return float(ACTIONS[index])


@dataclass(frozen=True)
class StateFeatures:
    step_ratio: float
    mask_ratio: float
    task_progress: float
    prev_gamma_norm: float
    mean_confidence: float

    def __post_init__(self):
        for name, v in asdict(self).items():
            object.__setattr__(self, name, float(min(1.0, max(0.0, v))))

    def to_array(self) -> np.ndarray:
        return np.array([self.step_ratio, self.mask_ratio, self.task_progress,
                         self.prev_gamma_norm, self.mean_confidence])


def task_progress(task: str, model: ToyModel, state: DiffusionState, cond: Condition) -> float:
    """Task signal measured on the revealed generation tokens only."""
    gen = state.gen_tokens
    revealed = gen[gen != model.vocab.mask_id]
    if task == "keywords":
        return keyword_coverage(revealed, cond.keywords)
    if task == "length":
        # word count: revealed tokens ahead of the first revealed eos
        eos = np.flatnonzero(gen == model.vocab.eos_id)
        head = gen[: eos[0]] if len(eos) else gen
        current = int(np.count_nonzero(head != model.vocab.mask_id))
        return current / len(cond.source)
    if task in ("neg2pos", "pos2neg"):
        return float(sentiment_score(revealed, cond.polarity, model.vocab.polarity) > 0.5)
    raise InvalidConfigError(f"unknown task {task!r}")


def featurize(task: str, model: ToyModel, state: DiffusionState, cond: Condition,
              prev_gamma: float, confidences: Optional[np.ndarray] = None,
              gamma_max: float = GAMMA_MAX) -> StateFeatures:
    lo, hi = state.gen_range
    masked = state.masked[lo:hi]
    if confidences is None:
        confidences = state.confidence
    conf = np.asarray(confidences)[lo:hi][masked]
    conf = conf[np.isfinite(conf)]
    mean_conf = 1.0 if not masked.any() else (float(conf.mean()) if len(conf) else 0.0)
    return StateFeatures(
        step_ratio=(state.steps - state.k) / state.steps,
        mask_ratio=masked.sum() / (hi - lo),
        task_progress=task_progress(task, model, state, cond),
        prev_gamma_norm=prev_gamma / gamma_max,
        mean_confidence=mean_conf,
    )


@dataclass(frozen=True)
class EnvConfig:
    task: str = "keywords"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    repeat: int = 1
    num_keywords: int = 10
    source_length: Tuple[int, int] = (12, 20)

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfigError(f"unknown task {self.task!r}")
        if self.repeat < 1:
            raise InvalidConfigError("repeat must be >= 1")
        if self.num_keywords < 1:
            raise InvalidConfigError("num_keywords must be >= 1")
        lo, hi = self.source_length
        if not 1 <= lo <= hi:
            raise InvalidConfigError("source_length must satisfy 1 <= lo <= hi")

    @property
    def steps(self) -> int:
        return self.sampler.steps

    @property
    def num_decisions(self) -> int:
        return num_decisions(self.sampler.steps, self.repeat)


def make_condition(config: EnvConfig, model: ToyModel, rng: np.random.Generator) -> Condition:
    if config.task == "keywords":
        kw = rng.choice(model.vocab.content_ids, size=config.num_keywords, replace=False)
        return Condition("keywords", keywords=frozenset(kw.tolist()))
    lo, hi = config.source_length
    source = sample_sequence(model, int(rng.integers(lo, hi + 1)), rng)
    if config.task == "length":
        return Condition("length_window", window=(0.4, 0.8), source=tuple(source.tolist()))
    target = POSITIVE if config.task == "neg2pos" else NEGATIVE
    return Condition("target_polarity", polarity=target, source=tuple(source.tolist()))


def condition_for_seed(config: EnvConfig, model: ToyModel, seed: int) -> Condition:
    return make_condition(config, model, np.random.default_rng(seed))


def condition_to_dict(cond: Condition) -> dict:
    return {"kind": cond.kind, "keywords": sorted(cond.keywords), "window": list(cond.window),
            "polarity": cond.polarity, "source": list(cond.source)}


class Policy(Protocol):
    def act_batch(self, features: np.ndarray, rng: np.random.Generator,
                  temperature: float = 1.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (action indices, log-probabilities, value estimates) per row."""


@dataclass
class EpisodeRecord:
    features: List[List[float]]
    actions: List[int]
    logprobs: List[float]
    values: List[float]
    rewards: List[float]
    gammas: List[float]
    breakdown: Optional[RewardBreakdown] = None
    tokens: List[int] = field(default_factory=list)
    condition: Optional[dict] = None

    @property
    def num_decisions(self) -> int:
        return len(self.actions)

    @property
    def reward(self) -> float:
        return self.rewards[-1]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("features", "actions", "logprobs", "values",
                                            "rewards", "gammas", "tokens", "condition")}
        d["breakdown"] = None if self.breakdown is None else self.breakdown.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        d = dict(d)
        bd = d.pop("breakdown")
        return cls(**d, breakdown=None if bd is None else RewardBreakdown(**bd))


def write_episodes(records: Sequence[EpisodeRecord], path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_episodes(path) -> List[EpisodeRecord]:
    with Path(path).open() as fh:
        return [EpisodeRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def featurize_batch(task: str, model: ToyModel, state: BatchState, enc: EncodedConditions,
                    source_lengths: np.ndarray, prev_gamma: np.ndarray,
                    gamma_max: float = GAMMA_MAX) -> np.ndarray:
    """Row-wise ``featurize`` over a batch; returns (E, 5)."""
    gen = state.gen
    E, L = gen.shape
    masked = gen == model.vocab.mask_id
    if task == "keywords":
        hit = enc.keywords & present_tokens(state.rows, model.vocab.size)
        progress = hit.sum(1) / enc.keywords.sum(1)
    elif task == "length":
        is_eos = gen == model.vocab.eos_id
        first = np.where(is_eos.any(1), is_eos.argmax(1), L)
        before = np.arange(L)[None, :] < first[:, None]
        progress = (before & ~masked).sum(1) / source_lengths
    else:
        pol = np.where(masked, 0, model.vocab.polarity[gen])
        t = enc.target[:, None]
        progress = ((pol == t).sum(1) > (pol == -t).sum(1)).astype(float)
    conf = state.confidence[:, 1:]
    known = masked & np.isfinite(conf)
    n_known = known.sum(1)
    mean_conf = np.where(n_known > 0, np.where(known, conf, 0.0).sum(1) / np.maximum(n_known, 1), 0.0)
    mean_conf = np.where(masked.any(1), mean_conf, 1.0)
    x = np.column_stack([
        np.full(E, (state.steps - state.k) / state.steps),
        masked.sum(1) / L,
        progress,
        np.asarray(prev_gamma, dtype=np.float64) / gamma_max,
        mean_conf,
    ])
    return np.clip(x, 0.0, 1.0)


class GuidanceEnv:
    """Couples a policy (or a fixed schedule) to the toy sampler for one task."""

    def __init__(self, model: ToyModel, config: EnvConfig, weights: Optional[RewardWeights] = None,
                 gamma_max: float = GAMMA_MAX):
        self.model = model
        self.config = config
        self.weights = weights or RewardWeights.for_task(config.task)
        self.gamma_max = gamma_max

    @property
    def num_decisions(self) -> int:
        return self.config.num_decisions

    def _prefix(self, cond: Condition) -> Tuple[int, ...]:
        return cond.source if self.config.task != "keywords" else ()

    def sample_conditions(self, rng: np.random.Generator, n: int) -> List[Condition]:
        return [make_condition(self.config, self.model, rng) for _ in range(n)]

    def _refresh_confidence(self, state: BatchState, enc: EncodedConditions, gammas: np.ndarray) -> None:
        # every row shares the plan, so staleness is uniform across the batch
        cols = batch_active_cols(state, self.config.sampler)
        if cols.shape[1] and not np.isfinite(state.confidence[0, cols[0]]).all():
            _, conf = batch_predict(self.model, state.rows, cols, gammas, enc)
            r = np.arange(len(cols))[:, None]
            stale = ~np.isfinite(state.confidence[r, cols])
            state.confidence[r, cols] = np.where(stale, conf, state.confidence[r, cols])

    def rollout_batch(self, policy: Policy, conds: Sequence[Condition], rng: np.random.Generator,
                      temperature: float = 1.0) -> List[EpisodeRecord]:
        cfg = self.config
        E = len(conds)
        plan = cfg.sampler.step_plan()
        enc = encode_conditions(self.model, conds)
        src_len = np.array([max(len(c.source), 1) for c in conds], dtype=np.float64)
        state = batch_initial_state(cfg.sampler, self.model.vocab.mask_id, [self._prefix(c) for c in conds])
        prev = np.zeros(E)
        feats, acts, logps, vals = [], [], [], []
        for j in range(self.num_decisions):
            block_steps = plan[j * cfg.repeat:(j + 1) * cfg.repeat]
            state.block_index = block_steps[0][0]
            self._refresh_confidence(state, enc, prev)
            x = featurize_batch(cfg.task, self.model, state, enc, src_len, prev, self.gamma_max)
            a, logp, v = policy.act_batch(x, rng, temperature)
            gammas = ACTIONS[a]
            for entry in block_steps:
                batch_run_step(self.model, state, gammas, enc, cfg.sampler, entry)
            feats.append(x)
            acts.append(a)
            logps.append(logp)
            vals.append(v)
            prev = gammas
        records = []
        for e, cond in enumerate(conds):
            tokens = state.gen[e]
            bd = terminal_reward(cfg.task, self.model, tokens, cond, self.weights)
            rewards = [0.0] * self.num_decisions
            rewards[-1] = bd.total
            records.append(EpisodeRecord(
                features=[f[e].tolist() for f in feats],
                actions=[int(a[e]) for a in acts],
                logprobs=[float(lp[e]) for lp in logps],
                values=[float(v[e]) for v in vals],
                rewards=rewards,
                gammas=[float(ACTIONS[a[e]]) for a in acts],
                breakdown=bd,
                tokens=tokens.tolist(),
                condition=condition_to_dict(cond),
            ))
        return records

    def rollout(self, policy: Policy, rng: np.random.Generator, temperature: float = 1.0,
                cond: Optional[Condition] = None) -> EpisodeRecord:
        if cond is None:
            cond = make_condition(self.config, self.model, rng)
        return self.rollout_batch(policy, [cond], rng, temperature)[0]

    def replay_batch(self, schedule: GuidanceSchedule,
                     conds: Sequence[Condition]) -> List[Tuple[np.ndarray, RewardBreakdown]]:
        """Run a fixed schedule on many prompts without consulting any policy."""
        if schedule.steps != self.config.steps or schedule.repeat != self.config.repeat:
            raise ContractViolation("schedule horizon does not match the environment")
        tokens = batch_generate(self.model, conds, schedule.per_step(), self.config.sampler,
                                [self._prefix(c) for c in conds])
        return [(t, terminal_reward(self.config.task, self.model, t, c, self.weights))
                for t, c in zip(tokens, conds)]

    def replay(self, schedule: GuidanceSchedule, cond: Condition) -> Tuple[np.ndarray, RewardBreakdown]:
        return self.replay_batch(schedule, [cond])[0]


class BanditEnv:
    """Single-decision sanity task: reward 1 iff the chosen action equals ``target``."""

    def __init__(self, target: int = 6):
        self.target = target

    @property
    def num_decisions(self) -> int:
        return 1

    def sample_conditions(self, rng: np.random.Generator, n: int) -> List[None]:
        return [None] * n

    def rollout_batch(self, policy: Policy, conds: Sequence, rng: np.random.Generator,
                      temperature: float = 1.0) -> List[EpisodeRecord]:
        x = np.tile([0.0, 1.0, 0.0, 0.0, 0.5], (len(conds), 1))
        a, logp, v = policy.act_batch(x, rng, temperature)
        return [EpisodeRecord([x[e].tolist()], [int(a[e])], [float(logp[e])], [float(v[e])],
                              [1.0 if a[e] == self.target else 0.0], [float(ACTIONS[a[e]])])
                for e in range(len(conds))]

    def rollout(self, policy: Policy, rng: np.random.Generator, temperature: float = 1.0,
                cond=None) -> EpisodeRecord:
        return self.rollout_batch(policy, [None], rng, temperature)[0]
