import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyncfg.aggregate import (TrajectorySet, freq_weighted_trajectory, freq_weighted_values, mean_trajectory,
                              sample_trajectories)
from dyncfg.env import ACTIONS, EnvConfig, GuidanceEnv
from dyncfg.errors import ContractViolation, InvalidInputError
from dyncfg.ppo import ActorCritic, init_networks
from dyncfg.sampler import SamplerConfig


def tset_strategy(max_n=40, max_m=8):
    return st.integers(1, max_n).flatmap(
        lambda n: st.integers(1, max_m).flatmap(
            lambda m: st.lists(st.lists(st.integers(0, 12), min_size=m, max_size=m), min_size=n, max_size=n)))


def _tset(idx):
    return TrajectorySet(ACTIONS[np.array(idx)])


class FixedDistributionPolicy:
    """Ignores the state and samples from one known distribution over the 13 actions."""

    def __init__(self, probs):
        self.probs = np.asarray(probs)

    def act_batch(self, features, rng, temperature=1.0):
        n = len(features)
        a = rng.choice(13, size=n, p=self.probs)
        return a, np.log(self.probs[a]), np.zeros(n)


def _env(model, K=10, L=8, n=1):
    return GuidanceEnv(model, EnvConfig("keywords", SamplerConfig(steps=K, gen_length=L), repeat=n))


def test_mean_examples():
    s = mean_trajectory(TrajectorySet([[1.0, 2.0], [2.0, 3.0]], steps=2))
    assert s.values == [1.5, 2.5] and s.kind == "rl_mean"
    one = TrajectorySet([[0.25, 3.0, 1.0]], steps=3)
    assert mean_trajectory(one).values == [0.25, 3.0, 1.0]


def test_freq_hand_case():
    g = np.array([[2.0], [2.0], [2.0], [0.0]])
    assert freq_weighted_values(g, 2)[0] == pytest.approx(1.8, abs=1e-12)
    assert abs(freq_weighted_values(g, 50)[0] - 2.0) < 1e-6


def test_errors():
    with pytest.raises(InvalidInputError):
        freq_weighted_values(np.array([[1.0]]), 0.5)
    empty = TrajectorySet(np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        mean_trajectory(empty)
    with pytest.raises(ContractViolation):
        TrajectorySet([[0.3, 1.0]])


@settings(max_examples=100, deadline=None)
@given(tset_strategy())
def test_p1_equals_mean(idx):
    t = _tset(idx)
    np.testing.assert_allclose(freq_weighted_trajectory(t, 1).values, mean_trajectory(t).values,
                               rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(tset_strategy(), st.floats(1, 60))
def test_convex_hull(idx, p):
    t = _tset(idx)
    lo, hi = t.gammas.min(axis=0), t.gammas.max(axis=0)
    for vals in (mean_trajectory(t).values, freq_weighted_values(t.gammas, p)):
        assert (np.array(vals) >= lo - 1e-12).all() and (np.array(vals) <= hi + 1e-12).all()


@settings(max_examples=100, deadline=None)
@given(tset_strategy(max_m=1), st.floats(1, 20), st.floats(1, 20))
def test_mode_pull_monotone(idx, p1, p2):
    t = _tset(idx)
    vals, counts = np.unique(t.gammas[:, 0], return_counts=True)
    if (counts == counts.max()).sum() > 1:
        return
    mode = vals[counts.argmax()]
    lo, hi = sorted((p1, p2))
    d_lo = abs(freq_weighted_values(t.gammas, lo)[0] - mode)
    d_hi = abs(freq_weighted_values(t.gammas, hi)[0] - mode)
    assert d_hi <= d_lo + 1e-12


@settings(max_examples=100, deadline=None)
@given(tset_strategy(), st.integers(0, 1000))
def test_split_consistency(idx, seed):
    t = _tset(idx)
    if t.size < 2:
        return
    cut = int(np.random.default_rng(seed).integers(1, t.size))
    a, b = t.split(slice(0, cut)), t.split(slice(cut, None))
    combined = (a.size * np.array(mean_trajectory(a).values) + b.size * np.array(mean_trajectory(b).values)) / t.size
    np.testing.assert_allclose(combined, mean_trajectory(t).values, rtol=0, atol=1e-12)


def test_sampling_structure(model):
    env = _env(model)
    pol = ActorCritic(init_networks(0))
    t = sample_trajectories(pol, env, 7, 1.0, seed=3)
    assert t.gammas.shape == (7, 10) and t.temperature == 1.0
    s = mean_trajectory(t)
    assert s.num_blocks == 10 and s.meta["N"] == 7 and s.meta["temperature"] == 1.0
    assert freq_weighted_trajectory(t, 3).meta["p"] == 3


def test_temperature_zero_identical(model):
    env = _env(model)
    pol = ActorCritic(init_networks(1))
    cond = env.sample_conditions(np.random.default_rng(0), 1)
    t = sample_trajectories(pol, env, 6, 0.0, seed=0, conditions=cond)
    assert (t.gammas == t.gammas[0]).all()
    one = sample_trajectories(pol, env, 1, 0.0, seed=5, conditions=cond)
    np.testing.assert_array_equal(one.gammas[0], t.gammas[0])


def test_monte_carlo_mean(model):
    probs = np.random.default_rng(0).dirichlet(np.ones(13))
    env = _env(model, K=4, L=4)
    t = sample_trajectories(FixedDistributionPolicy(probs), env, 1000, 1.0, seed=1)
    expect = float(probs @ ACTIONS)
    se = np.sqrt(float(probs @ (ACTIONS - expect) ** 2) / 1000)
    for v in mean_trajectory(t).values:
        assert abs(v - expect) < 3 * se


def test_sampling_errors(model):
    env = _env(model)
    pol = ActorCritic(init_networks(0))
    with pytest.raises(InvalidInputError):
        sample_trajectories(pol, env, 0)
    with pytest.raises(InvalidInputError):
        sample_trajectories(pol, env, 3, temperature=-1)
