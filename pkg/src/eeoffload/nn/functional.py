"""Stateless numeric helpers: softmax, cross-entropy and friends.

Reductions run in float64 and results are cast back to the input's float
type, so float32 callers keep float32 outputs.
"""
from __future__ import annotations

import numpy as np

_ONE_BELOW = np.nextafter(1.0, 0.0)


def _check_finite(z: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{what} contains non-finite values")


def softmax(z, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(z)
    if z.shape[axis] < 2:
        raise ValueError(f"softmax needs at least 2 classes, got {z.shape[axis]}")
    _check_finite(z, "softmax input")
    out_dtype = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    z64 = z.astype(np.float64)
    e = np.exp(z64 - z64.max(axis=axis, keepdims=True))
    return (e / e.sum(axis=axis, keepdims=True)).astype(out_dtype)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z64 = np.asarray(z, dtype=np.float64)
    shifted = z64 - z64.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def max_confidence(z) -> tuple[int, float]:
    """Return ``(argmax, max probability)`` of ``softmax(z)`` for a 1-D ``z``.

    The probability is computed in float64 and never rounds up to exactly
    1.0: for finite logits and K >= 2 the true value is strictly below one.
    """
    z64 = np.asarray(z, dtype=np.float64).reshape(-1)
    if z64.size < 2:
        raise ValueError("need at least 2 logits")
    _check_finite(z64, "logits")
    k = int(np.argmax(z64))
    e = np.exp(z64 - z64[k])
    e[k] = 0.0
    conf = 1.0 / (1.0 + e.sum())
    return k, float(min(conf, _ONE_BELOW))


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [N, K], got shape {logits.shape}")
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"batch mismatch: {logits.shape[0]} logits rows vs {labels.shape[0]} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy_loss(logits, labels) -> float:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = np.asarray(logits)
    labels = _check_labels(logits, labels)
    logp = log_softmax(logits, axis=1)
    return float(-logp[np.arange(labels.size), labels].mean())


def cross_entropy_grad(logits, labels) -> np.ndarray:
    """Gradient of :func:`cross_entropy_loss` with respect to ``logits``."""
    logits = np.asarray(logits)
    labels = _check_labels(logits, labels)
    g = np.exp(log_softmax(logits, axis=1))
    g[np.arange(labels.size), labels] -= 1.0
    g /= labels.size
    return g.astype(logits.dtype)


def cross_entropy_with_grad(logits, labels) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits)
    labels = _check_labels(logits, labels)
    logp = log_softmax(logits, axis=1)
    idx = np.arange(labels.size)
    loss = float(-logp[idx, labels].mean())
    g = np.exp(logp)
    g[idx, labels] -= 1.0
    g /= labels.size
    return loss, g.astype(logits.dtype)
