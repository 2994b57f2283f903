"""Seeded synthetic mask predictor.

The model is a smoothed bigram/unigram mixture over a small vocabulary. It
exposes the two logit functions classifier-free guidance needs (conditional
and unconditional) and doubles as the reference fluency model for perplexity.

Binary table format (``.tdlm``), all integers little-endian::

    magic   b"TOYDLM"            6 bytes
    version uint16               currently 1
    hlen    uint32               length of the JSON header in bytes
    header  JSON (utf-8)         seed, size, mask_id, eos_id, mix_alpha,
                                 boost_delta, polarity (list of -1/0/+1)
    bigram  float64[size*size]   row-major
    unigram float64[size]
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, FrozenSet, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, InvalidConfigError, InvalidInputError

if TYPE_CHECKING:
    from .sampler import DiffusionState

FORMAT_MAGIC = b"TOYDLM"
FORMAT_VERSION = 1

POSITIVE, NEUTRAL, NEGATIVE = 1, 0, -1

# Gamma shape for the random table weights; small values give peaky rows.
BIGRAM_CONCENTRATION = 0.25
UNIGRAM_CONCENTRATION = 0.25
SMOOTHING = 1e-3


@dataclass(frozen=True)
class Vocabulary:
    size: int = 64
    mask_id: int = 63
    eos_id: int = 62
    # polarity[i] in {-1, 0, +1}; reserved ids are neutral
    polarity: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.size < 8:
            raise InvalidConfigError(f"vocabulary size must be >= 8, got {self.size}")
        for name in ("mask_id", "eos_id"):
            v = getattr(self, name)
            if not 0 <= v < self.size:
                raise InvalidConfigError(f"{name}={v} outside [0, {self.size})")
        if self.mask_id == self.eos_id:
            raise InvalidConfigError("mask_id and eos_id must differ")
        pol = np.zeros(self.size, dtype=np.int8) if self.polarity is None else np.asarray(self.polarity, dtype=np.int8)
        if pol.shape != (self.size,) or not np.isin(pol, (-1, 0, 1)).all():
            raise InvalidConfigError("polarity must hold one label in {-1,0,1} per token id")
        pol = pol.copy()
        pol[[self.mask_id, self.eos_id]] = NEUTRAL
        pol.setflags(write=False)
        object.__setattr__(self, "polarity", pol)

    @property
    def reserved(self) -> Tuple[int, int]:
        return (self.mask_id, self.eos_id)

    @property
    def content_ids(self) -> np.ndarray:
        """Token ids that are neither mask nor eos."""
        ids = np.arange(self.size)
        return ids[(ids != self.mask_id) & (ids != self.eos_id)]


@dataclass(frozen=True)
class Condition:
    kind: str
    keywords: FrozenSet[int] = frozenset()
    window: Tuple[float, float] = (0.4, 0.8)
    polarity: int = POSITIVE
    source: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("keywords", "length_window", "target_polarity"):
            raise InvalidInputError(f"unknown condition kind {self.kind!r}")
        object.__setattr__(self, "keywords", frozenset(int(t) for t in self.keywords))
        object.__setattr__(self, "source", tuple(int(t) for t in self.source))
        if self.kind == "keywords" and not self.keywords:
            raise InvalidInputError("keyword condition needs at least one keyword")
        if self.kind == "length_window":
            lo, hi = self.window
            if not 0 < lo <= hi <= 1:
                raise InvalidInputError(f"length window {self.window} must satisfy 0 < lo <= hi <= 1")
            if not self.source:
                raise InvalidInputError("length condition needs a source sequence")
        if self.kind == "target_polarity" and self.polarity not in (POSITIVE, NEGATIVE):
            raise InvalidInputError("target polarity must be +1 or -1")

    def length_bounds(self) -> Tuple[int, int]:
        """Inclusive word-count window [ceil(lo*n), floor(hi*n)] for a source of n tokens."""
        n = len(self.source)
        lo, hi = self.window
        return math.ceil(lo * n - 1e-12), math.floor(hi * n + 1e-12)


@dataclass(frozen=True)
class ToyModel:
    vocab: Vocabulary
    bigram: np.ndarray
    unigram: np.ndarray
    mix_alpha: float = 0.7
    boost_delta: float = 2.0
    seed: int = 0
    log_mix: np.ndarray = field(init=False, repr=False, compare=False)
    log_unigram: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        V = self.vocab.size
        bigram = np.array(self.bigram, dtype=np.float64)
        unigram = np.array(self.unigram, dtype=np.float64)
        if bigram.shape != (V, V) or unigram.shape != (V,):
            raise InvalidConfigError("table shapes do not match the vocabulary")
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise InvalidConfigError(f"mix_alpha must lie in [0, 1], got {self.mix_alpha}")
        if self.boost_delta < 0:
            raise InvalidConfigError(f"boost_delta must be >= 0, got {self.boost_delta}")
        m = self.vocab.mask_id
        live = np.ones(V, dtype=bool)
        live[m] = False
        if bigram[:, m].any() or unigram[m] != 0.0:
            raise InvalidConfigError("mask token must carry zero probability")
        if (bigram[:, live] <= 0).any() or (unigram[live] <= 0).any():
            raise InvalidConfigError("probabilities over non-mask tokens must be positive")
        if not np.allclose(bigram.sum(axis=1), 1.0, atol=1e-9, rtol=0) or abs(unigram.sum() - 1.0) > 1e-9:
            raise InvalidConfigError("tables must be normalized")
        for a in (bigram, unigram):
            a.setflags(write=False)
        object.__setattr__(self, "bigram", bigram)
        object.__setattr__(self, "unigram", unigram)
        with np.errstate(divide="ignore"):
            log_mix = np.log(self.mix_alpha * bigram + (1.0 - self.mix_alpha) * unigram[None, :])
            log_uni = np.log(unigram)
        for a in (log_mix, log_uni):
            a.setflags(write=False)
        object.__setattr__(self, "log_mix", log_mix)
        object.__setattr__(self, "log_unigram", log_uni)


def _normalize_smoothed(w: np.ndarray, live: np.ndarray) -> np.ndarray:
    w = np.where(live, w, 0.0)
    p = w / w.sum(axis=-1, keepdims=True)
    p = np.where(live, p + SMOOTHING, 0.0)
    return p / p.sum(axis=-1, keepdims=True)


def build_model(seed: int = 0, vocab_size: int = 64, mix_alpha: float = 0.7,
                boost_delta: float = 2.0) -> ToyModel:
    if vocab_size < 8:
        raise InvalidConfigError(f"vocab_size must be >= 8, got {vocab_size}")
    rng = np.random.default_rng(seed)
    V = vocab_size
    mask_id, eos_id = V - 1, V - 2
    content = np.arange(V - 2)
    order = rng.permutation(content)
    q = len(content) // 4
    polarity = np.zeros(V, dtype=np.int8)
    polarity[order[:q]] = POSITIVE
    polarity[order[q:2 * q]] = NEGATIVE
    vocab = Vocabulary(V, mask_id, eos_id, polarity)

    live = np.ones(V, dtype=bool)
    live[mask_id] = False
    bigram = _normalize_smoothed(rng.gamma(BIGRAM_CONCENTRATION, size=(V, V)), live[None, :])
    unigram = _normalize_smoothed(rng.gamma(UNIGRAM_CONCENTRATION, size=V), live)
    # keep eos rare so it rarely truncates keyword-task outputs
    unigram[eos_id] *= 0.1
    unigram /= unigram.sum()
    bigram[:, eos_id] *= 0.1
    bigram /= bigram.sum(axis=1, keepdims=True)
    return ToyModel(vocab, bigram, unigram, mix_alpha, boost_delta, seed)


def _left_context_logits(model: ToyModel, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
    mask_id = model.vocab.mask_id
    left = np.where(positions > 0, tokens[np.maximum(positions - 1, 0)], mask_id)
    # masked (or absent) left neighbour falls back to the unigram
    return np.where((left == mask_id)[:, None], model.log_unigram[None, :], model.log_mix[left])


def batch_uncond_logits(model: ToyModel, tokens: np.ndarray, positions: Sequence[int]) -> np.ndarray:
    """Unconditional logits for several masked positions, shape (len(positions), V)."""
    positions = np.asarray(positions, dtype=np.int64)
    if (tokens[positions] != model.vocab.mask_id).any():
        raise ContractViolation("logits requested at an unmasked position")
    return _left_context_logits(model, tokens, positions)


def condition_boost(model: ToyModel, tokens: np.ndarray, gen_range: Tuple[int, int],
                    positions: Sequence[int], cond: Condition) -> np.ndarray:
    """Additive logit boost (conditional minus unconditional) per requested position."""
    V, delta = model.vocab.size, model.boost_delta
    positions = np.asarray(positions, dtype=np.int64)
    boost = np.zeros((len(positions), V))
    if delta == 0.0:
        return boost
    if cond.kind == "keywords":
        present = set(tokens[gen_range[0]:gen_range[1]].tolist())
        missing = [t for t in sorted(cond.keywords) if t not in present]
        boost[:, missing] = delta
    elif cond.kind == "target_polarity":
        pol = model.vocab.polarity
        boost[:, pol == cond.polarity] = delta
        boost[:, pol == -cond.polarity] = -delta
    else:
        lo, hi = cond.length_bounds()
        rel = positions - gen_range[0]
        boost[:, model.vocab.eos_id] = np.where((rel >= lo) & (rel <= hi), delta, -delta)
    boost[:, model.vocab.mask_id] = 0.0
    return boost


def uncond_logits(model: ToyModel, state: "DiffusionState", position: int) -> np.ndarray:
    return batch_uncond_logits(model, state.tokens, [position])[0]


def cond_logits(model: ToyModel, state: "DiffusionState", position: int, cond: Condition) -> np.ndarray:
    base = uncond_logits(model, state, position)
    return base + condition_boost(model, state.tokens, state.gen_range, [position], cond)[0]


def truncate_at_eos(tokens: Sequence[int], eos_id: int) -> np.ndarray:
    """Tokens up to and including the first eos."""
    tokens = np.asarray(tokens, dtype=np.int64)
    hits = np.flatnonzero(tokens == eos_id)
    return tokens if len(hits) == 0 else tokens[: hits[0] + 1]


def sequence_perplexity(model: ToyModel, tokens: Sequence[int]) -> float:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise InvalidInputError("perplexity of an empty sequence is undefined")
    if (tokens == model.vocab.mask_id).any():
        raise InvalidInputError("sequence contains mask tokens")
    if tokens.min() < 0 or tokens.max() >= model.vocab.size:
        raise InvalidInputError("token id out of range")
    seq = truncate_at_eos(tokens, model.vocab.eos_id)
    nll = -model.log_unigram[seq[0]] - model.log_mix[seq[:-1], seq[1:]].sum()
    return float(np.exp(nll / len(seq)))


def sample_sequence(model: ToyModel, length: int, rng: np.random.Generator,
                    exclude_eos: bool = True) -> np.ndarray:
    """Ancestral sample from the unconditional chain; used to build task sources."""
    V = model.vocab.size
    out = np.empty(length, dtype=np.int64)
    probs = np.exp(model.log_unigram)
    for i in range(length):
        p = probs.copy()
        if exclude_eos:
            p[model.vocab.eos_id] = 0.0
        p /= p.sum()
        out[i] = rng.choice(V, p=p)
        probs = np.exp(model.log_mix[out[i]])
    return out


# -- serialization -----------------------------------------------------------

def model_to_bytes(model: ToyModel) -> bytes:
    header = json.dumps({
        "seed": int(model.seed),
        "size": model.vocab.size,
        "mask_id": model.vocab.mask_id,
        "eos_id": model.vocab.eos_id,
        "mix_alpha": model.mix_alpha,
        "boost_delta": model.boost_delta,
        "polarity": model.vocab.polarity.tolist(),
    }, sort_keys=True).encode()
    return b"".join([
        FORMAT_MAGIC,
        struct.pack("<HI", FORMAT_VERSION, len(header)),
        header,
        model.bigram.astype("<f8").tobytes(),
        model.unigram.astype("<f8").tobytes(),
    ])


def model_from_bytes(blob: bytes) -> ToyModel:
    if blob[:6] != FORMAT_MAGIC:
        raise InvalidInputError("not a toy model file")
    version, hlen = struct.unpack_from("<HI", blob, 6)
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported model format version {version}")
    off = 12
    h = json.loads(blob[off:off + hlen])
    off += hlen
    V = h["size"]
    bigram = np.frombuffer(blob, dtype="<f8", count=V * V, offset=off).reshape(V, V)
    unigram = np.frombuffer(blob, dtype="<f8", count=V, offset=off + 8 * V * V)
    vocab = Vocabulary(V, h["mask_id"], h["eos_id"], np.array(h["polarity"]))
    return ToyModel(vocab, bigram, unigram, h["mix_alpha"], h["boost_delta"], h["seed"])


def save_model(model: ToyModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ToyModel:
    return model_from_bytes(Path(path).read_bytes())
