"""Temperature scaling for branch confidences."""
from __future__ import annotations

import math

import numpy as np

from .nn.functional import log_softmax

T_MIN = 0.05
T_MAX = 20.0
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def nll_at_temperature(logits: np.ndarray, labels, temperature: float) -> float:
    """Mean negative log-likelihood of ``softmax(logits / temperature)``."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(z / temperature, axis=1)
    return float(-logp[np.arange(len(labels)), labels].mean())


def fit_temperature(logits: np.ndarray, labels, lo: float = T_MIN, hi: float = T_MAX,
                    tol: float = 1e-3, min_samples: int = 100) -> float:
    """Golden-section search for the NLL-minimizing temperature on ``[lo, hi]``.

    NLL is convex in 1/T, hence unimodal in T, so the bracket search is
    sound. The result is never worse than T = 1.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("fit_temperature needs a non-empty [N, K] logit array")
    if z.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} validation samples, got {z.shape[0]}")
    labels = np.asarray(labels, dtype=np.int64)

    def f(t):
        return nll_at_temperature(z, labels, t)

    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    t_star = 0.5 * (a + b)
    if f(t_star) > f(1.0):
        return 1.0
    return float(t_star)
