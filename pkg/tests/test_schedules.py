import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyncfg.errors import ContractViolation, InvalidConfigError, InvalidInputError
from dyncfg.schedules import (HEURISTICS, GuidanceSchedule, HeuristicKind, constant_schedule, eval_schedule,
                              grid_search_curves, materialize, num_decisions, repeat_actions)

PAIRS = [("linear_increase", "linear_decrease"), ("cosine_increase", "cosine_decrease"),
         ("beta", "inverted_beta")]
progress = st.floats(0, 1)
gmax = st.floats(0.1, 10)


def test_linear_endpoints():
    k = HeuristicKind("linear_increase")
    assert eval_schedule(k, 0.0) == 0.0 and eval_schedule(k, 1.0) == 3.0


@given(progress)
def test_fixed_default(s):
    assert eval_schedule(HeuristicKind("fixed"), s) == 1.5


def test_beta_shape():
    assert eval_schedule(HeuristicKind("beta"), 0.5) == 3.0
    assert eval_schedule(HeuristicKind("beta"), 0.0) == 0.0
    assert eval_schedule(HeuristicKind("inverted_beta"), 0.5) == 0.0


def test_out_of_range_progress():
    with pytest.raises(InvalidInputError):
        eval_schedule(HeuristicKind("beta"), 1.01)


def test_kind_validation():
    with pytest.raises(InvalidConfigError):
        HeuristicKind("sawtooth")
    with pytest.raises(InvalidConfigError):
        HeuristicKind("fixed", gamma_max=0.0)
    with pytest.raises(InvalidConfigError):
        HeuristicKind("fixed", gamma_max=1.0, fixed_value=1.5)


@settings(max_examples=200)
@given(st.sampled_from(HEURISTICS), progress, gmax)
def test_range(name, s, g):
    v = eval_schedule(HeuristicKind(name, g, min(1.5, g)), s)
    assert 0.0 <= v <= g


@settings(max_examples=200)
@given(st.sampled_from(PAIRS), progress)
def test_symmetry(pair, s):
    a, b = (eval_schedule(HeuristicKind(n, 3.0), s) for n in pair)
    assert a + b == 3.0


@settings(max_examples=200)
@given(progress, progress, gmax)
def test_monotone(s1, s2, g):
    lo, hi = sorted((s1, s2))
    for name in ("linear_increase", "cosine_increase"):
        k = HeuristicKind(name, g, 0.0)
        assert eval_schedule(k, lo) <= eval_schedule(k, hi)
    for name in ("linear_decrease", "cosine_decrease"):
        k = HeuristicKind(name, g, 0.0)
        assert eval_schedule(k, lo) >= eval_schedule(k, hi)


def test_endpoints_all_curves():
    want = {"linear_increase": (0, 3), "linear_decrease": (3, 0), "cosine_increase": (0, 3),
            "cosine_decrease": (3, 0), "beta": (0, 0), "inverted_beta": (3, 3), "fixed": (1.5, 1.5)}
    for name, (a, b) in want.items():
        k = HeuristicKind(name)
        assert eval_schedule(k, 0.0) == pytest.approx(a, abs=1e-12)
        assert eval_schedule(k, 1.0) == pytest.approx(b, abs=1e-12)


# -- materialize / repeat ----------------------------------------------------------------

@given(st.integers(1, 60))
def test_materialize_fixed(m):
    assert materialize(HeuristicKind("fixed"), m, 1).values == [1.5] * m


def test_materialize_midpoints():
    assert materialize(HeuristicKind("linear_increase"), 3, 1).values == pytest.approx([0.5, 1.5, 2.5], abs=1e-12)
    for name in HEURISTICS:
        k = HeuristicKind(name)
        assert materialize(k, 1, 1).values == [eval_schedule(k, 0.5)]


def test_materialize_with_repeat():
    s = materialize(HeuristicKind("cosine_increase"), 60, 2)
    assert s.num_blocks == 30 and len(s.per_step()) == 60


def test_repeat_actions_examples():
    blocks = list(np.arange(30) * 0.1)
    steps = repeat_actions(blocks, 2, 60)
    assert steps[0] == steps[1] == blocks[0]
    assert steps[58] == steps[59] == blocks[29]
    assert repeat_actions([0.5, 1.0, 2.0], 1, 3) == [0.5, 1.0, 2.0]
    assert repeat_actions([1.0, 2.0, 3.0], 2, 5) == [1.0, 1.0, 2.0, 2.0, 3.0]
    with pytest.raises(ContractViolation):
        repeat_actions([1.0, 2.0], 2, 5)


@settings(max_examples=100)
@given(st.integers(1, 80), st.integers(1, 8), st.integers(0, 1000))
def test_horizon_accounting(K, n, seed):
    m = num_decisions(K, n)
    assert m == math.ceil(K / n) and m * n >= K
    vals = list(np.random.default_rng(seed).integers(0, 13, size=m) * 0.25)
    steps = repeat_actions(vals, n, K)
    assert len(steps) == K
    runs = 1 + sum(a != b for a, b in zip(steps, steps[1:]))
    assert runs <= m


# -- GuidanceSchedule ---------------------------------------------------------------------

def test_schedule_validation():
    with pytest.raises(InvalidConfigError):
        GuidanceSchedule([1.0] * 29, 1, 30)
    with pytest.raises(InvalidConfigError):
        GuidanceSchedule([3.5] * 30, 1, 30)


def test_schedule_json_roundtrip(tmp_path):
    s = GuidanceSchedule([0.5, 1.0, 2.75], 2, 6, "rl_mean", 3.0, {"N": 200})
    s.save(tmp_path / "s.json")
    back = GuidanceSchedule.load(tmp_path / "s.json")
    assert back == s
    assert set(s.to_dict()) == {"kind", "values", "K", "n", "gamma_max", "meta"}


# -- grid search ------------------------------------------------------------------------

def test_grid_single_candidate():
    c = constant_schedule(1.0, 4)
    assert grid_search_curves([c], lambda s: 0.0) is c


def test_grid_tie_prefers_lower_gamma():
    hi, lo = constant_schedule(2.0, 4), constant_schedule(0.5, 4)
    assert grid_search_curves([hi, lo], lambda s: 0.7) is lo


def test_grid_exhaustive_oracle():
    family = [constant_schedule(0.25 * i, 5) for i in range(13)]
    reward = lambda s: -(s.values[0] - 1.25) ** 2  # noqa: E731
    best = grid_search_curves(family, reward)
    oracle = max(family, key=reward)
    assert best is oracle and best.meta["gamma"] == 1.25


def test_grid_budget_and_errors():
    family = [constant_schedule(0.25 * i, 5) for i in range(13)]
    best = grid_search_curves(family, lambda s: s.values[0], budget=3)
    assert best.values[0] == 0.5
    with pytest.raises(InvalidInputError):
        grid_search_curves([], lambda s: 0.0)
    with pytest.raises(InvalidInputError):
        grid_search_curves(family, lambda s: 0.0, budget=0)
