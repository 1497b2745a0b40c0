"""Shared numerically stable primitives (64-bit throughout)."""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    """Stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softplus(x):
    """log(1 + e^x) without overflow; equals -log(sigmoid(-x))."""
    return np.logaddexp(0.0, x)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def logsumexp(x: np.ndarray) -> float:
    """Max-shifted log-sum-exp of a 1-d array."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))
