"""Base-class softmax head training and synthetic world generation.

Trains only the final linear softmax layer over fixed feature vectors; the
weights it produces play the role of the trained base-class weight matrix
consumed by the prior-fitting stage.  Synthetic worlds with known generative
parameters serve as oracles for the transfer experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .data import FeatureTable, WeightMatrix, rng_stream
from .exceptions import NumericError
from .softmax import xent_sum


@dataclass(frozen=True)
class TrainConfig:
    # weak default shrinkage: the base weights feed the concept model, and
    # heavier decay biases the fitted prior variance below the natural scale
    # of discriminatively trained weights
    l2_strength: float = 1e-5
    max_iters: int = 500
    grad_tolerance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.grad_tolerance <= 0:
            raise ValueError("grad_tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be nonnegative")


@dataclass(frozen=True)
class TrainResult:
    weights: WeightMatrix
    converged: bool
    n_iters: int
    final_loss: float
    final_grad_norm: float
    history: list = field(default_factory=list)  # (iter, loss, grad inf-norm)

    def history_json(self) -> str:
        records = [
            {"iteration": i, "loss": loss, "grad_norm": g} for i, loss, g in self.history
        ]
        return json.dumps(records)


def train_linear_softmax(base: FeatureTable, cfg: TrainConfig) -> TrainResult:
    """Fit base-class weights minimizing mean cross-entropy plus an L2 term.

    Objective: (1/N) * sum_n CE_n + (l2_strength/2) * ||W||_F^2, minimized by
    limited-memory quasi-Newton (history 10) from W = 0.
    """
    class_ids = base.class_ids
    if len(class_ids) < 2:
        raise ValueError("training table must contain at least 2 classes")
    y = np.searchsorted(class_ids, base.labels)
    X = base.features
    n, p = X.shape
    C = len(class_ids)
    n_evals = [0]

    def objective(w_flat):
        n_evals[0] += 1
        W = w_flat.reshape(C, p)
        value, grad = xent_sum(W, X, y)
        value = value / n + 0.5 * cfg.l2_strength * float(np.sum(W * W))
        grad = grad / n + cfg.l2_strength * W
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at evaluation {n_evals[0]}")
        return value, grad.ravel()

    history: list[tuple[int, float, float]] = []

    def record(w_flat):
        value, grad = objective(w_flat)
        history.append((len(history) + 1, float(value), float(np.abs(grad).max())))

    res = scipy.optimize.minimize(
        objective,
        np.zeros(C * p),
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={
            "maxiter": cfg.max_iters,
            "maxcor": 10,
            "gtol": cfg.grad_tolerance,
            "ftol": 1e-16,
        },
    )
    W = res.x.reshape(C, p)
    _, grad = objective(res.x)
    grad_norm = float(np.abs(grad).max())
    return TrainResult(
        weights=WeightMatrix(W, class_ids),
        converged=grad_norm <= cfg.grad_tolerance,
        n_iters=int(res.nit),
        final_loss=float(res.fun),
        final_grad_norm=grad_norm,
        history=history,
    )


@dataclass(frozen=True)
class SyntheticWorldConfig:
    p: int
    n_base: int
    n_novel: int
    per_class: int
    weight_mean: float = 0.0  # scalar broadcast or length-p vector
    weight_var: float = 1.0
    noise_var: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.weight_var <= 0 or self.noise_var <= 0:
            raise ValueError("variances must be positive")
        if min(self.p, self.n_base, self.n_novel, self.per_class) < 1:
            raise ValueError("dimensions and counts must be >= 1")
        mean = np.broadcast_to(np.asarray(self.weight_mean, dtype=float), (self.p,))
        object.__setattr__(self, "weight_mean", mean.copy())


def generate_synthetic_world(
    cfg: SyntheticWorldConfig,
) -> tuple[FeatureTable, FeatureTable, WeightMatrix]:
    """Sample a world where class weights are Gaussian around a shared mean
    and features are noisy copies of their class weight vector.

    Returns (base table, novel table, true weights for all classes); novel
    classes are numbered after the base classes.
    """
    rng = rng_stream(cfg.seed)
    n_classes = cfg.n_base + cfg.n_novel
    weights = cfg.weight_mean + np.sqrt(cfg.weight_var) * rng.standard_normal(
        (n_classes, cfg.p)
    )
    feats = np.repeat(weights, cfg.per_class, axis=0) + np.sqrt(
        cfg.noise_var
    ) * rng.standard_normal((n_classes * cfg.per_class, cfg.p))
    labels = np.repeat(np.arange(n_classes), cfg.per_class)
    base_mask = labels < cfg.n_base
    base = FeatureTable(feats[base_mask], labels[base_mask])
    novel = FeatureTable(feats[~base_mask], labels[~base_mask])
    return base, novel, WeightMatrix(weights, np.arange(n_classes))
