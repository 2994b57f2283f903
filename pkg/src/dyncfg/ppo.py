"""Actor-critic PPO from scratch: GAE, clipped surrogate updates, training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .env import ACTIONS, NUM_FEATURES, EpisodeRecord
from .errors import ContractViolation, InvalidConfigError
from .nets import Params, init_mlp, log_softmax, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

NUM_ACTIONS = len(ACTIONS)
CHECKPOINT_VERSION = 1


@dataclass
class PolicyParams:
    actor: Params
    critic: Params

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.actor.items()},
                            {k: v.copy() for k, v in self.critic.items()})

    def items(self):
        for k, v in self.actor.items():
            yield f"actor/{k}", v
        for k, v in self.critic.items():
            yield f"critic/{k}", v


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    update_epochs: int = 4
    minibatch_size: int = 64
    discount: float = 1.0
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    episodes_per_iteration: int = 16
    iterations: int = 100
    max_grad_norm: float = 0.5
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise InvalidConfigError("clip_epsilon must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise InvalidConfigError("discount must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise InvalidConfigError("gae_lambda must lie in [0, 1]")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise InvalidConfigError("learning_rate and max_grad_norm must be positive")
        if min(self.update_epochs, self.minibatch_size, self.episodes_per_iteration) < 1:
            raise InvalidConfigError("epochs, minibatch size and episodes per iteration must be >= 1")
        if self.iterations < 0:
            raise InvalidConfigError("iterations must be >= 0")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))


def init_networks(seed: int) -> PolicyParams:
    rng = np.random.default_rng(seed)
    actor = init_mlp(NUM_FEATURES, NUM_ACTIONS, out_gain=0.01, rng=rng)
    critic = init_mlp(NUM_FEATURES, 1, out_gain=1.0, rng=rng)
    return PolicyParams(actor, critic)


def _check_features(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.isfinite(x).all():
        raise ContractViolation("non-finite features")
    return x


def policy_forward(params: PolicyParams, features) -> Tuple[np.ndarray, np.ndarray]:
    """Action logits and log-probabilities, each (B, 13)."""
    logits, _ = mlp_forward(params.actor, _check_features(features))
    return logits, log_softmax(logits)


def value_forward(params: PolicyParams, features) -> np.ndarray:
    v, _ = mlp_forward(params.critic, _check_features(features))
    return v[:, 0]


def entropy(logp: np.ndarray) -> np.ndarray:
    return -(np.exp(logp) * logp).sum(axis=-1)


class ActorCritic:
    """Samples actions from the actor and reports the critic's estimate.

    ``calls`` counts forward passes so callers can assert a schedule replay
    never touched the policy.
    """

    def __init__(self, params: PolicyParams):
        self.params = params
        self.calls = 0

    def action_probs(self, features, temperature: float = 1.0) -> np.ndarray:
        logits, _ = policy_forward(self.params, features)
        if temperature == 0:
            out = np.zeros_like(logits)
            out[np.arange(len(logits)), logits.argmax(axis=1)] = 1.0
            return out
        return np.exp(log_softmax(logits / temperature))

    def act_batch(self, features: np.ndarray, rng: np.random.Generator,
                  temperature: float = 1.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sample one action per row.

        Temperature rescales the logits for sampling only (0 = argmax); the
        returned log-probabilities are always under the untempered policy.
        """
        if temperature < 0:
            raise ContractViolation("temperature must be >= 0")
        self.calls += 1
        logits, logp = policy_forward(self.params, features)
        if temperature == 0:
            a = logits.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(log_softmax(logits / temperature)), axis=1)
            u = rng.random(len(logits))[:, None]
            a = np.minimum((cdf < u * cdf[:, -1:]).sum(axis=1), NUM_ACTIONS - 1)
        rows = np.arange(len(a))
        return a, logp[rows, a], value_forward(self.params, features)

    def act(self, features: np.ndarray, rng: np.random.Generator,
            temperature: float = 1.0) -> Tuple[int, float, float]:
        a, logp, v = self.act_batch(features, rng, temperature)
        return int(a[0]), float(logp[0]), float(v[0])


def compute_gae(rewards: Sequence[float], values: Sequence[float], discount: float = 1.0,
                gae_lambda: float = 0.95, terminal_value: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ContractViolation("rewards and values must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    nxt_v, nxt_a = terminal_value, 0.0
    for j in range(n - 1, -1, -1):
        delta = rewards[j] + discount * nxt_v - values[j]
        nxt_a = delta + discount * gae_lambda * nxt_a
        adv[j] = nxt_a
        nxt_v = values[j]
    return adv, adv + values


@dataclass
class Batch:
    features: np.ndarray
    actions: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    def subset(self, idx) -> "Batch":
        return Batch(self.features[idx], self.actions[idx], self.old_logprobs[idx],
                     self.advantages[idx], self.returns[idx])


def build_batch(episodes: Sequence[EpisodeRecord], config: PpoConfig) -> Batch:
    feats, acts, logps, advs, rets = [], [], [], [], []
    for ep in episodes:
        a, r = compute_gae(ep.rewards, ep.values, config.discount, config.gae_lambda)
        feats.extend(ep.features)
        acts.extend(ep.actions)
        logps.extend(ep.logprobs)
        advs.extend(a)
        rets.extend(r)
    return Batch(np.asarray(feats, dtype=np.float64), np.asarray(acts, dtype=np.int64),
                 np.asarray(logps), np.asarray(advs), np.asarray(rets))


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_loss_and_grads(params: PolicyParams, batch: Batch, config: PpoConfig,
                       policy_weight: float = 1.0):
    """Total loss, gradients for both networks and diagnostics on one minibatch."""
    B = len(batch)
    eps = config.clip_epsilon
    logits, a_cache = mlp_forward(params.actor, batch.features)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    rows = np.arange(B)
    logp_a = logp[rows, batch.actions]
    ratio = np.exp(logp_a - batch.old_logprobs)
    surr = clipped_surrogate(ratio, batch.advantages, eps)
    policy_loss = -surr.mean()
    ent = entropy(logp)
    v, c_cache = mlp_forward(params.critic, batch.features)
    v = v[:, 0]
    value_loss = np.mean((v - batch.returns) ** 2)
    total = policy_weight * policy_loss + config.value_coef * value_loss - config.entropy_coef * ent.mean()
    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(ent.mean()),
        "approx_kl": float(np.mean(batch.old_logprobs - logp_a)),
    }
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite PPO loss: {stats}")

    # surrogate gradient flows only where the unclipped branch attains the min
    unclipped = ratio * batch.advantages <= np.clip(ratio, 1 - eps, 1 + eps) * batch.advantages
    d_logp_a = np.where(unclipped, -ratio * batch.advantages / B, 0.0) * policy_weight
    onehot = np.zeros_like(logits)
    onehot[rows, batch.actions] = 1.0
    d_logits = d_logp_a[:, None] * (onehot - probs)
    # d(-c * mean H)/dz = c * p * (log p + H) / B
    d_logits += config.entropy_coef * probs * (logp + ent[:, None]) / B
    g_actor = mlp_backward(params.actor, a_cache, d_logits)
    dv = (config.value_coef * 2.0 * (v - batch.returns) / B)[:, None]
    g_critic = mlp_backward(params.critic, c_cache, dv)
    return float(total), PolicyParams(g_actor, g_critic), stats


class Adam:
    def __init__(self, params: PolicyParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: PolicyParams, grads: PolicyParams) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        g_all = dict(grads.items())
        for k, p in params.items():
            g = g_all[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads: PolicyParams, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for _, g in grads.items())))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, g in grads.items():
            g *= scale
    return norm


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


def ppo_update(params: PolicyParams, batch: Batch, config: PpoConfig, rng: np.random.Generator,
               optimizer: Optional[Adam] = None) -> Tuple[PolicyParams, Dict[str, float]]:
    """Clipped-surrogate epochs over shuffled minibatches; returns new params and mean stats."""
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    params = params.copy()
    optimizer = optimizer or Adam(params, config.learning_rate, config.adam_betas, config.adam_eps)
    batch = Batch(batch.features, batch.actions, batch.old_logprobs,
                  normalize_advantages(batch.advantages), batch.returns)
    acc: Dict[str, List[float]] = {}
    for _ in range(config.update_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), config.minibatch_size):
            mb = batch.subset(order[start:start + config.minibatch_size])
            _, grads, stats = ppo_loss_and_grads(params, mb, config)
            stats["grad_norm"] = clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(params, grads)
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
    return params, {k: float(np.mean(v)) for k, v in acc.items()}


HISTORY_FIELDS = ("iteration", "mean_reward", "policy_loss", "value_loss", "entropy", "approx_kl")


@dataclass
class TrainHistory:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> List[float]:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.rows:
            w.writerow([r["iteration"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())


def train(env, config: PpoConfig, seed: int,
          condition_sampler: Optional[Callable[[np.random.Generator], object]] = None,
          params: Optional[PolicyParams] = None) -> Tuple[PolicyParams, TrainHistory]:
    """On-policy PPO: collect episodes, compute GAE per episode, update, log.

    ``env`` needs ``rollout_batch`` and ``sample_conditions``; ``condition_sampler``
    draws the training prompt for each episode (``None`` lets the env draw one).
    """
    init_ss, roll_ss, upd_ss = np.random.SeedSequence(seed).spawn(3)
    params = init_networks(int(init_ss.generate_state(1)[0])) if params is None else params.copy()
    roll_rng = np.random.default_rng(roll_ss)
    upd_rng = np.random.default_rng(upd_ss)
    optimizer = Adam(params, config.learning_rate, config.adam_betas, config.adam_eps)
    history = TrainHistory()
    for it in range(config.iterations):
        policy = ActorCritic(params)
        n = config.episodes_per_iteration
        conds = ([condition_sampler(roll_rng) for _ in range(n)] if condition_sampler
                 else env.sample_conditions(roll_rng, n))
        episodes = env.rollout_batch(policy, conds, roll_rng, 1.0)
        batch = build_batch(episodes, config)
        params, stats = ppo_update(params, batch, config, upd_rng, optimizer)
        row = {"iteration": it, "mean_reward": float(np.mean([ep.reward for ep in episodes]))}
        row.update({k: stats[k] for k in HISTORY_FIELDS[2:]})
        history.rows.append(row)
        log.debug("iter %d reward %.4f entropy %.3f", it, row["mean_reward"], row["entropy"])
    return params, history


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: PolicyParams, config: PpoConfig, seed: int, extra: Optional[dict] = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "seed": seed, "ppo": asdict(config), "extra": extra or {}}
    arrays = {k: v for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Tuple[PolicyParams, PpoConfig, dict]:
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InvalidConfigError(f"unsupported checkpoint version {meta.get('version')}")
        actor = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("actor/")}
        critic = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("critic/")}
    return PolicyParams(actor, critic), PpoConfig(**meta["ppo"]), meta
