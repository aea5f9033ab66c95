"""Accuracy, negative log-likelihood, and calibration metrics.

Calibration uses equal-width confidence bins on [0, 1] with right-inclusive
edges (confidence exactly 0 falls into the first bin); confidence is the
per-row maximum probability.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2:
        raise ValueError("probs must be a 2-D matrix of row distributions")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero((probs < 0).any(axis=1) | (np.abs(sums - 1) > 1e-6))
    if len(bad):
        raise ValueError(f"row {bad[0]} is not a probability distribution")
    return probs


def _bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    idx = np.ceil(conf * n_bins).astype(int)
    return np.clip(idx, 1, n_bins) - 1


def calibration_curve(probs, labels, n_bins: int = 10) -> list[tuple[float, float, int]]:
    """Per-bin (mean confidence, empirical accuracy, count) tuples.

    Empty bins are omitted.  ``labels`` are column indices of the true class.
    """
    probs = _check_probs(probs)
    labels = np.asarray(labels)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    idx = _bin_index(conf, n_bins)
    out = []
    for b in range(n_bins):
        mask = idx == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        out.append((float(conf[mask].mean()), float(correct[mask].mean()), cnt))
    return out

def ece(probs, labels, n_bins: int = 10) -> float:
    """Expected calibration error: count-weighted mean |accuracy - confidence|
    over the occupied confidence bins."""
    bins = calibration_curve(probs, labels, n_bins)
    n = sum(cnt for _, _, cnt in bins)
    return float(sum(cnt * abs(acc - conf) for conf, acc, cnt in bins) / n)


def nll(probs, labels) -> float:
    """Mean negative log-likelihood of the true labels, probabilities clamped
    below at 1e-12."""
    probs = _check_probs(probs)
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def accuracy(probs, labels) -> float:
    probs = _check_probs(probs)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))
