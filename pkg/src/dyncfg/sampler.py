"""Forward masking and the guided reverse diffusion loop.

Decoding is greedy (temperature 0) with low-confidence remasking: at each
reverse step every masked position of the active semi-autoregressive block is
predicted, and only the most confident predictions are committed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractViolation, InvalidConfigError, InvalidInputError
from .toy_dlm import Condition, ToyModel, batch_uncond_logits, condition_boost


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    gen_length: int = 24
    block_length: Optional[int] = None
    unmask_per_step: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")
        if self.gen_length < 1:
            raise InvalidConfigError("gen_length must be >= 1")
        if self.block_length is None:
            object.__setattr__(self, "block_length", self.gen_length)
        if not 1 <= self.block_length <= self.gen_length:
            raise InvalidConfigError("block_length must lie in [1, gen_length]")
        if self.unmask_per_step is None:
            object.__setattr__(self, "unmask_per_step", math.ceil(self.gen_length / self.steps))
        if self.unmask_per_step < 1:
            raise InvalidConfigError("unmask_per_step must be >= 1")
        if self.num_blocks > self.steps:
            raise InvalidConfigError("need at least one reverse step per block")

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.gen_length / self.block_length)

    def block_bounds(self, b: int, offset: int = 0) -> Tuple[int, int]:
        start = offset + b * self.block_length
        return start, min(start + self.block_length, offset + self.gen_length)

    def step_plan(self) -> List[Tuple[int, int]]:
        """(block index, tokens to unmask) for each of the K steps, in execution order.

        Steps are split across blocks as evenly as possible, earlier blocks taking
        the remainder. The last step of a block unmasks whatever is left; a block
        that is exhausted early spends its remaining steps idle (count 0).
        """
        nb = self.num_blocks
        base, extra = divmod(self.steps, nb)
        plan = []
        for b in range(nb):
            s = base + (1 if b < extra else 0)
            lo, hi = self.block_bounds(b)
            remaining = hi - lo
            for i in range(s):
                n = remaining if i == s - 1 else min(self.unmask_per_step, remaining)
                plan.append((b, n))
                remaining -= n
        return plan


@dataclass
class DiffusionState:
    tokens: np.ndarray
    mask_id: int
    gen_range: Tuple[int, int]
    steps: int
    k: int
    block_index: int = 0
    # softmax confidence of the latest prediction per position (nan = none yet)
    confidence: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.confidence is None:
            self.confidence = np.full(len(self.tokens), np.nan)
        lo, hi = self.gen_range
        outside = np.ones(len(self.tokens), dtype=bool)
        outside[lo:hi] = False
        if (self.tokens[outside] == self.mask_id).any():
            raise ContractViolation("masked token outside the generation range")
        if not 0 <= self.k <= self.steps:
            raise ContractViolation(f"step index {self.k} outside [0, {self.steps}]")

    @property
    def masked(self) -> np.ndarray:
        return self.tokens == self.mask_id

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def gen_tokens(self) -> np.ndarray:
        return self.tokens[self.gen_range[0]:self.gen_range[1]]

    def copy(self) -> "DiffusionState":
        return replace(self, tokens=self.tokens.copy(), confidence=self.confidence.copy())


def forward_mask(x0: Sequence[int], t: float, rng: np.random.Generator, mask_id: int,
                 steps: int = 1) -> DiffusionState:
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"noise level t={t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.int64)
    if (x0 == mask_id).any():
        raise InvalidInputError("clean sequence already contains mask tokens")
    drop = rng.random(len(x0)) < t
    return DiffusionState(np.where(drop, mask_id, x0), mask_id, (0, len(x0)), steps,
                          k=int(round(t * steps)))


def cfg_combine(l_uncond: np.ndarray, l_cond: np.ndarray, gamma: float) -> np.ndarray:
    l_uncond = np.asarray(l_uncond, dtype=np.float64)
    l_cond = np.asarray(l_cond, dtype=np.float64)
    if l_uncond.shape != l_cond.shape:
        raise ContractViolation(f"logit shapes differ: {l_uncond.shape} vs {l_cond.shape}")
    if np.any(np.asarray(gamma) < 0):
        raise InvalidInputError("guidance scale must be >= 0")
    with np.errstate(invalid="ignore"):
        diff = l_cond - l_uncond
    # -inf - -inf on the mask column gives nan; that entry stays -inf
    diff = np.where(np.isnan(diff), 0.0, diff)
    # l_u + (1 + g)(l_c - l_u) rearranged so that g = 0 returns l_c bit for bit
    return l_cond + gamma * diff


def initial_state(config: SamplerConfig, mask_id: int, prefix: Sequence[int] = ()) -> DiffusionState:
    prefix = np.asarray(prefix, dtype=np.int64)
    tokens = np.concatenate([prefix, np.full(config.gen_length, mask_id, dtype=np.int64)])
    return DiffusionState(tokens, mask_id, (len(prefix), len(tokens)), config.steps, config.steps)


def active_masked_positions(state: DiffusionState, config: SamplerConfig) -> np.ndarray:
    lo, hi = config.block_bounds(state.block_index, state.gen_range[0])
    return lo + np.flatnonzero(state.tokens[lo:hi] == state.mask_id)


def predict(model: ToyModel, state: DiffusionState, gamma: float, cond: Optional[Condition],
            positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy token and its softmax probability at each position under guided logits."""
    l_u = batch_uncond_logits(model, state.tokens, positions)
    if cond is None:
        guided = l_u
    else:
        boost = condition_boost(model, state.tokens, state.gen_range, positions, cond)
        guided = cfg_combine(l_u, l_u + boost, gamma)
    best = guided.argmax(axis=1)
    top = guided[np.arange(len(positions)), best]
    conf = 1.0 / np.exp(guided - top[:, None]).sum(axis=1)
    return best, conf


def reverse_step(model: ToyModel, state: DiffusionState, gamma: float, cond: Optional[Condition],
                 config: SamplerConfig, n_unmask: Optional[int] = None) -> DiffusionState:
    """One reverse step on the active block; returns a new state with k decremented."""
    positions = active_masked_positions(state, config)
    if state.k < 1 or len(positions) == 0:
        raise ContractViolation("reverse step needs k >= 1 and a masked position in the active block")
    n = config.unmask_per_step if n_unmask is None else n_unmask
    n = max(1, min(n, len(positions)))
    best, conf = predict(model, state, gamma, cond, positions)
    # stable sort: equal confidence resolves to the lower position index
    order = np.argsort(-conf, kind="stable")[:n]
    new = state.copy()
    new.tokens[positions[order]] = best[order]
    new.confidence[positions] = conf
    new.k -= 1
    return new


def idle_step(state: DiffusionState) -> DiffusionState:
    new = state.copy()
    new.k -= 1
    return new


GammaSource = Union[Sequence[float], Callable[[DiffusionState], float]]


@dataclass
class StepRecord:
    k: int
    gamma: float
    masked: int
    mean_confidence: float

    def to_dict(self) -> dict:
        conf = None if math.isnan(self.mean_confidence) else self.mean_confidence
        return {"k": self.k, "gamma": self.gamma, "masked": self.masked, "mean_confidence": conf}


def run_step(model: ToyModel, state: DiffusionState, gamma: float, cond: Optional[Condition],
             config: SamplerConfig, plan_entry: Tuple[int, int]) -> Tuple[DiffusionState, StepRecord]:
    block, n = plan_entry
    state.block_index = block
    if n == 0:
        nxt = idle_step(state)
        conf = float("nan")
    else:
        positions = active_masked_positions(state, config)
        nxt = reverse_step(model, state, gamma, cond, config, n)
        conf = float(np.mean(nxt.confidence[positions]))
    return nxt, StepRecord(nxt.k, float(gamma), nxt.num_masked, conf)


def generate(model: ToyModel, cond: Optional[Condition], gamma_source: GammaSource,
             config: SamplerConfig, prefix: Sequence[int] = ()) -> Tuple[np.ndarray, List[StepRecord]]:
    """Fill a fully masked generation span block by block.

    ``gamma_source`` is either a length-K sequence (execution order) or a
    callable receiving the current state. ``cond=None`` samples unconditionally.
    """
    state = initial_state(config, model.vocab.mask_id, prefix)
    if not callable(gamma_source) and len(gamma_source) != config.steps:
        raise ContractViolation(f"need {config.steps} guidance values, got {len(gamma_source)}")
    log = []
    for i, entry in enumerate(config.step_plan()):
        g = gamma_source(state) if callable(gamma_source) else gamma_source[i]
        state, rec = run_step(model, state, g, cond, config, entry)
        log.append(rec)
    if state.num_masked:
        raise ContractViolation("generation ended with masked tokens")
    return state.gen_tokens.copy(), log


def write_trajectory_log(log: Sequence[StepRecord], path) -> None:
    with Path(path).open("w") as fh:
        for rec in log:
            fh.write(json.dumps(rec.to_dict()) + "\n")


# -- batched engine ------------------------------------------------------------
# Many episodes share one SamplerConfig and therefore one step plan, so every
# episode has the same number of masked positions at every step. Rows hold the
# left-context token in column 0 (mask when there is no prompt) followed by the
# generation span.

@dataclass
class EncodedConditions:
    kind: str
    keywords: Optional[np.ndarray] = None    # (E, V) bool
    target: Optional[np.ndarray] = None      # (E,) +1/-1
    bounds: Optional[np.ndarray] = None      # (E, 2) inclusive word-count window


def encode_conditions(model: ToyModel, conds: Sequence[Condition]) -> EncodedConditions:
    kinds = {c.kind for c in conds}
    if len(kinds) != 1:
        raise ContractViolation("a batch must share one condition kind")
    kind = kinds.pop()
    E, V = len(conds), model.vocab.size
    if kind == "keywords":
        kw = np.zeros((E, V), dtype=bool)
        for e, c in enumerate(conds):
            kw[e, sorted(c.keywords)] = True
        return EncodedConditions(kind, keywords=kw)
    if kind == "target_polarity":
        return EncodedConditions(kind, target=np.array([c.polarity for c in conds]))
    return EncodedConditions(kind, bounds=np.array([c.length_bounds() for c in conds]))


def present_tokens(rows: np.ndarray, vocab_size: int) -> np.ndarray:
    """(E, V) flags of tokens occurring in the generation columns of each row."""
    present = np.zeros((rows.shape[0], vocab_size), dtype=bool)
    present[np.arange(rows.shape[0])[:, None], rows[:, 1:]] = True
    return present


def batch_boost(model: ToyModel, rows: np.ndarray, cols: np.ndarray, enc: EncodedConditions) -> np.ndarray:
    E, P = cols.shape
    V, delta = model.vocab.size, model.boost_delta
    boost = np.zeros((E, P, V))
    if delta == 0.0:
        return boost
    if enc.kind == "keywords":
        missing = enc.keywords & ~present_tokens(rows, V)
        boost[:] = np.where(missing, delta, 0.0)[:, None, :]
    elif enc.kind == "target_polarity":
        pol = model.vocab.polarity[None, :]
        t = enc.target[:, None]
        boost[:] = np.where(pol == t, delta, np.where(pol == -t, -delta, 0.0))[:, None, :]
    else:
        rel = cols - 1
        inside = (rel >= enc.bounds[:, :1]) & (rel <= enc.bounds[:, 1:])
        boost[:, :, model.vocab.eos_id] = np.where(inside, delta, -delta)
    boost[:, :, model.vocab.mask_id] = 0.0
    return boost


def batch_predict(model: ToyModel, rows: np.ndarray, cols: np.ndarray, gammas: np.ndarray,
                  enc: Optional[EncodedConditions]) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy tokens and confidences, each (E, P), for masked columns ``cols``."""
    mask_id = model.vocab.mask_id
    left = np.take_along_axis(rows, cols - 1, axis=1)
    l_u = np.where((left == mask_id)[..., None], model.log_unigram, model.log_mix[left])
    if enc is None:
        guided = l_u
    else:
        l_c = l_u + batch_boost(model, rows, cols, enc)
        guided = cfg_combine(l_u, l_c, np.asarray(gammas, dtype=np.float64)[:, None, None])
    best = guided.argmax(axis=2)
    top = np.take_along_axis(guided, best[..., None], axis=2)
    conf = 1.0 / np.exp(guided - top).sum(axis=2)
    return best, conf


@dataclass
class BatchState:
    rows: np.ndarray          # (E, 1 + L)
    confidence: np.ndarray    # (E, 1 + L), nan = never predicted
    mask_id: int
    steps: int
    k: int
    block_index: int = 0

    @property
    def gen(self) -> np.ndarray:
        return self.rows[:, 1:]

    @property
    def num_masked(self) -> int:
        return int((self.rows[0, 1:] == self.mask_id).sum())


def batch_initial_state(config: SamplerConfig, mask_id: int,
                        prefixes: Sequence[Sequence[int]]) -> BatchState:
    E = len(prefixes)
    rows = np.full((E, 1 + config.gen_length), mask_id, dtype=np.int64)
    for e, p in enumerate(prefixes):
        if len(p):
            rows[e, 0] = p[-1]
    return BatchState(rows, np.full(rows.shape, np.nan), mask_id, config.steps, config.steps)


def batch_active_cols(state: BatchState, config: SamplerConfig) -> np.ndarray:
    """(E, P) masked columns of the active block; P is shared by construction."""
    lo, hi = config.block_bounds(state.block_index, 1)
    _, c = np.nonzero(state.rows[:, lo:hi] == state.mask_id)
    return lo + c.reshape(state.rows.shape[0], -1)


def batch_run_step(model: ToyModel, state: BatchState, gammas: np.ndarray,
                   enc: Optional[EncodedConditions], config: SamplerConfig,
                   plan_entry: Tuple[int, int]) -> BatchState:
    """In-place reverse step for every row; mirrors ``run_step``."""
    block, n = plan_entry
    state.block_index = block
    if n > 0:
        cols = batch_active_cols(state, config)
        if cols.shape[1] == 0 or state.k < 1:
            raise ContractViolation("reverse step needs k >= 1 and a masked position in the active block")
        n = min(n, cols.shape[1])
        best, conf = batch_predict(model, state.rows, cols, gammas, enc)
        order = np.argsort(-conf, axis=1, kind="stable")[:, :n]
        r = np.arange(state.rows.shape[0])[:, None]
        state.rows[r, np.take_along_axis(cols, order, 1)] = np.take_along_axis(best, order, 1)
        state.confidence[r, cols] = conf
    state.k -= 1
    return state


def batch_generate(model: ToyModel, conds: Sequence[Optional[Condition]], gammas: Sequence[float],
                   config: SamplerConfig, prefixes: Optional[Sequence[Sequence[int]]] = None) -> np.ndarray:
    """Vectorised ``generate`` for one shared per-step schedule; returns (E, L) tokens."""
    if len(gammas) != config.steps:
        raise ContractViolation(f"need {config.steps} guidance values, got {len(gammas)}")
    E = len(conds)
    prefixes = prefixes if prefixes is not None else [()] * E
    enc = None if conds[0] is None else encode_conditions(model, conds)
    state = batch_initial_state(config, model.vocab.mask_id, prefixes)
    for i, entry in enumerate(config.step_plan()):
        batch_run_step(model, state, np.full(E, gammas[i]), enc, config, entry)
    return state.gen.copy()
