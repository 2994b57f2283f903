"""Terminal task rewards: controllability, fluency and content preservation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, InvalidConfigError, InvalidInputError
from .toy_dlm import Condition, ToyModel, sequence_perplexity

TASKS = ("keywords", "length", "neg2pos", "pos2neg")
SENTIMENT_SHARPNESS = 6.0


@dataclass(frozen=True)
class RewardWeights:
    lambda_ctrl: float
    lambda_ppl: float
    lambda_semantic: float
    ppl_max: float

    def __post_init__(self):
        w = (self.lambda_ctrl, self.lambda_ppl, self.lambda_semantic)
        if min(w) < 0 or max(w) <= 0:
            raise InvalidConfigError(f"reward weights must be non-negative with one positive, got {w}")
        if self.ppl_max <= 1:
            raise InvalidConfigError("ppl_max must exceed 1")

    @classmethod
    def for_task(cls, task: str) -> "RewardWeights":
        try:
            return cls(*DEFAULT_WEIGHTS[task])
        except KeyError:
            raise InvalidConfigError(f"unknown task {task!r}") from None


DEFAULT_WEIGHTS = {
    "keywords": (0.5, 0.5, 0.0, 120.0),
    "length": (0.45, 0.45, 0.10, 500.0),
    "neg2pos": (0.6, 0.3, 0.1, 300.0),
    "pos2neg": (0.3, 0.6, 0.1, 300.0),
}


@dataclass(frozen=True)
class RewardBreakdown:
    r_ctrl: float
    r_ppl: float
    r_semantic: float
    total: float
    ppl: float

    def to_dict(self) -> dict:
        return asdict(self)


def ppl_reward(ppl: float, ppl_max: float) -> float:
    if ppl < 1:
        raise InvalidInputError(f"perplexity must be >= 1, got {ppl}")
    return 1.0 - float(np.clip((ppl - 1.0) / (ppl_max - 1.0), 0.0, 1.0))


def keyword_reward(tokens: Iterable[int], keywords: Iterable[int]) -> float:
    present = set(int(t) for t in tokens)
    return 1.0 if all(int(k) in present for k in keywords) else 0.0


def keyword_coverage(tokens: Iterable[int], keywords: Iterable[int]) -> float:
    keywords = set(int(k) for k in keywords)
    if not keywords:
        return 1.0
    return len(keywords & set(int(t) for t in tokens)) / len(keywords)


def output_length(tokens: Sequence[int], eos_id: int) -> int:
    """Token count before the first eos (whole sequence when none)."""
    tokens = list(tokens)
    return tokens.index(eos_id) if eos_id in tokens else len(tokens)


def length_reward(out_len: int, src_len: int, window: Tuple[float, float] = (0.4, 0.8)) -> float:
    if src_len < 1:
        raise InvalidInputError("source length must be >= 1")
    lo = math.ceil(window[0] * src_len - 1e-12)
    hi = math.floor(window[1] * src_len + 1e-12)
    if lo <= out_len <= hi:
        return 1.0
    nearest = lo if out_len < lo else hi
    return max(0.0, 1.0 - abs(out_len - nearest) / src_len)


def semantic_reward(output: Iterable[int], source: Iterable[int], reserved: Iterable[int] = ()) -> float:
    reserved = set(reserved)
    a = set(int(t) for t in output) - reserved
    b = set(int(t) for t in source) - reserved
    if not b:
        raise InvalidInputError("source must contain at least one content token")
    return len(a & b) / len(a | b)


def sentiment_score(tokens: Iterable[int], target: int, polarity: np.ndarray,
                    sharpness: float = SENTIMENT_SHARPNESS) -> float:
    """Toy classifier: logistic squash of the target-minus-opposite polarity fraction."""
    labels = polarity[np.asarray(list(tokens), dtype=np.int64)]
    labelled = np.count_nonzero(labels)
    if labelled == 0:
        return 0.5
    diff = (np.count_nonzero(labels == target) - np.count_nonzero(labels == -target)) / labelled
    return float(1.0 / (1.0 + np.exp(-sharpness * diff)))


def control_score(task: str, model: ToyModel, tokens: Sequence[int], cond: Condition) -> float:
    """Task controllability term on (possibly partial) text."""
    if task == "keywords":
        return keyword_reward(tokens, cond.keywords)
    if task == "length":
        out_len = output_length(list(tokens), model.vocab.eos_id)
        return length_reward(out_len, len(cond.source), cond.window)
    if task in ("neg2pos", "pos2neg"):
        return sentiment_score(tokens, cond.polarity, model.vocab.polarity)
    raise InvalidConfigError(f"unknown task {task!r}")


def terminal_reward(task: str, model: ToyModel, tokens: Sequence[int], cond: Condition,
                    weights: RewardWeights) -> RewardBreakdown:
    tokens = np.asarray(tokens, dtype=np.int64)
    if (tokens == model.vocab.mask_id).any():
        raise ContractViolation("terminal reward needs a fully unmasked output")
    r_ctrl = control_score(task, model, tokens, cond)
    ppl = sequence_perplexity(model, tokens)
    r_ppl = ppl_reward(ppl, weights.ppl_max)
    r_sem = 0.0
    if weights.lambda_semantic > 0 and cond.source:
        r_sem = semantic_reward(tokens, cond.source, model.vocab.reserved)
    total = weights.lambda_ctrl * r_ctrl + weights.lambda_ppl * r_ppl + weights.lambda_semantic * r_sem
    return RewardBreakdown(r_ctrl, r_ppl, r_sem, float(total), ppl)
