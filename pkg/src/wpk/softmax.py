"""Stable softmax / cross-entropy primitives shared by training and inference."""

from __future__ import annotations

import numpy as np

from .exceptions import NumericError


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def xent_sum(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed softmax cross-entropy and its gradient w.r.t. W.

    W is (C, p), X is (n, p), y holds class indices in 0..C-1.
    """
    logits = X @ W.T
    logp = log_softmax(logits)
    value = -logp[np.arange(len(y)), y].sum()
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite cross-entropy (largest logit {np.abs(logits).max():.3e})"
        )
    probs = np.exp(logp)
    probs[np.arange(len(y)), y] -= 1.0
    grad = probs.T @ X
    return float(value), grad


def predict_point(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return softmax(X @ W.T)
