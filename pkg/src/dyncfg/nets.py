"""Two-hidden-layer MLP with LayerNorm + ReLU, forward and exact backward in numpy."""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

Params = Dict[str, np.ndarray]

LN_EPS = 1e-5
HIDDEN = 128


def orthogonal(shape: Tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def init_mlp(in_dim: int, out_dim: int, out_gain: float, rng: np.random.Generator,
             hidden: int = HIDDEN, hidden_gain: float = np.sqrt(2.0)) -> Params:
    return {
        "W0": orthogonal((in_dim, hidden), hidden_gain, rng),
        "b0": np.zeros(hidden),
        "g0": np.ones(hidden),
        "s0": np.zeros(hidden),
        "W1": orthogonal((hidden, hidden), hidden_gain, rng),
        "b1": np.zeros(hidden),
        "g1": np.ones(hidden),
        "s1": np.zeros(hidden),
        "W2": orthogonal((hidden, out_dim), out_gain, rng),
        "b2": np.zeros(out_dim),
    }


def _ln_forward(h, g, s):
    mu = h.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(h.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (h - mu) * inv
    return g * xhat + s, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    n = xhat.shape[-1]
    dxhat = dy * g
    dh = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dh, (dy * xhat).sum(0), dy.sum(0)


def mlp_forward(p: Params, x: np.ndarray):
    """Returns output (B, out) and a cache for ``mlp_backward``."""
    x = np.atleast_2d(x)
    h0 = x @ p["W0"] + p["b0"]
    n0, c0 = _ln_forward(h0, p["g0"], p["s0"])
    a0 = np.maximum(n0, 0.0)
    h1 = a0 @ p["W1"] + p["b1"]
    n1, c1 = _ln_forward(h1, p["g1"], p["s1"])
    a1 = np.maximum(n1, 0.0)
    out = a1 @ p["W2"] + p["b2"]
    return out, (x, n0, c0, a0, n1, c1, a1)


def mlp_backward(p: Params, cache, dout: np.ndarray) -> Params:
    x, n0, c0, a0, n1, c1, a1 = cache
    g = {"W2": a1.T @ dout, "b2": dout.sum(0)}
    dn1 = (dout @ p["W2"].T) * (n1 > 0)
    dh1, g["g1"], g["s1"] = _ln_backward(dn1, p["g1"], c1)
    g["W1"] = a0.T @ dh1
    g["b1"] = dh1.sum(0)
    dn0 = (dh1 @ p["W1"].T) * (n0 > 0)
    dh0, g["g0"], g["s0"] = _ln_backward(dn0, p["g0"], c0)
    g["W0"] = x.T @ dh0
    g["b0"] = dh0.sum(0)
    return g


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
