import numpy as np
import pytest

from dyncfg.toy_dlm import ToyModel, Vocabulary, build_model


@pytest.fixture(scope="session")
def model():
    return build_model(0, 64)


def uniform_model(W=8, mix_alpha=0.7, boost_delta=2.0):
    """Uniform tables over the W - 1 non-mask tokens (mask is the last id)."""
    vocab = Vocabulary(size=W, mask_id=W - 1, eos_id=W - 2)
    live = W - 1
    bigram = np.zeros((W, W))
    bigram[:, :live] = 1.0 / live
    unigram = np.zeros(W)
    unigram[:live] = 1.0 / live
    return ToyModel(vocab, bigram, unigram, mix_alpha, boost_delta)


def rng(seed=0):
    return np.random.default_rng(seed)


# acceptance tests append one PASS/FAIL line per criterion; printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
