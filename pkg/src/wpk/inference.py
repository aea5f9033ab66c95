"""k-shot weight learning: MAP optimization, HMC sampling, and baselines.

Learning new-class weights from a support set means minimizing

    -log prior(W) - sum_n log softmax(W x_n)[y_n]

either to its mode (quasi-Newton) or by drawing posterior samples (leapfrog
HMC with dual-averaging step-size adaptation during warmup).  Baselines
(regularized logistic regression variants, cosine nearest neighbour) live
here too, implemented against raw penalties rather than prior objects so the
two routes check each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import FeatureTable, WeightMatrix, rng_stream
from .exceptions import CvInapplicableError, NumericError
from .priors import WeightPrior, _rows
from .softmax import predict_point, xent_sum

DEFAULT_CV_GRID = tuple(np.logspace(-5, 1, 7))
NN_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class PosteriorSpec:
    """k-shot posterior ingredients: a prior over weight rows plus the
    support set (X in local-class order; y in 0..way-1).  X may be None for
    a prior-only target (used by sampler diagnostics)."""

    prior: WeightPrior
    way: int
    X: np.ndarray | None = None
    y: np.ndarray | None = None

    @classmethod
    def from_support(cls, prior: WeightPrior, support: FeatureTable) -> "PosteriorSpec":
        classes = support.class_ids
        y = np.searchsorted(classes, support.labels)
        return cls(prior=prior, way=len(classes), X=support.features, y=y)

    @property
    def dim(self) -> int:
        if self.X is not None:
            return self.X.shape[1]
        return len(self.prior.init_location)


def neg_log_posterior(spec: PosteriorSpec, W) -> tuple[float, np.ndarray]:
    """Negative log posterior of the new-class weights and its gradient."""
    W = _rows(W)
    value, grad = spec.prior.log_density(W)
    value, grad = -value, -grad
    if spec.X is not None and len(spec.X):
        nll, g = xent_sum(W, spec.X, spec.y)
        value += nll
        grad += g
    if not np.isfinite(value):
        logits = spec.X @ W.T if spec.X is not None else W
        raise NumericError(
            f"non-finite posterior value (largest logit {np.abs(logits).max():.3e})"
        )
    return value, grad


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    grad_tolerance: float = 1e-8
    history_size: int = 10
    init: str = "prior_mean"  # or "zeros"

    def __post_init__(self):
        if self.grad_tolerance <= 0 or self.max_iters < 1 or self.history_size < 1:
            raise ValueError("optimizer config values must be positive")


@dataclass(frozen=True)
class MapResult:
    weights: np.ndarray
    converged: bool
    grad_norm: float
    n_iters: int


def _init_weights(spec: PosteriorSpec, init: str) -> np.ndarray:
    p = spec.dim
    if init == "zeros":
        return np.zeros((spec.way, p))
    return np.tile(spec.prior.init_location, (spec.way, 1))


def map_kshot(spec: PosteriorSpec, cfg: OptimizerConfig | None = None) -> MapResult:
    """Quasi-Newton minimizer of the negative log posterior."""
    cfg = cfg or OptimizerConfig()
    p = spec.dim

    def objective(w_flat):
        value, grad = neg_log_posterior(spec, w_flat.reshape(spec.way, p))
        return value, grad.ravel()

    res = scipy.optimize.minimize(
        objective,
        _init_weights(spec, cfg.init).ravel(),
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": cfg.max_iters,
            "maxcor": cfg.history_size,
            "gtol": cfg.grad_tolerance,
            "ftol": 1e-16,
        },
    )
    _, grad = objective(res.x)
    gnorm = float(np.abs(grad).max())
    return MapResult(
        weights=res.x.reshape(spec.way, p),
        converged=gnorm <= cfg.grad_tolerance or res.success,
        grad_norm=gnorm,
        n_iters=int(res.nit),
    )


@dataclass(frozen=True)
class HmcConfig:
    n_samples: int = 1000
    n_warmup: int = 500
    leapfrog_steps: int = 20
    target_accept: float = 0.8
    seed: int = 0
    init_step: float = 0.1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass(frozen=True)
class Predictor:
    """Either a point weight matrix or a stack of posterior draws."""

    point: np.ndarray | None = None
    samples: np.ndarray | None = None  # (M, way, p)

    def __post_init__(self):
        if (self.point is None) == (self.samples is None):
            raise ValueError("exactly one of point/samples must be given")
        if self.samples is not None and len(self.samples) == 0:
            raise ValueError("samples must be non-empty")


@dataclass(frozen=True)
class HmcResult:
    predictor: Predictor
    accept_rate: float
    step_size: float


def _leapfrog(grad_fn, w, r, step, n_steps):
    g = grad_fn(w)
    for _ in range(n_steps):
        r = r - 0.5 * step * g
        w = w + step * r
        g = grad_fn(w)
        r = r - 0.5 * step * g
    return w, r


def hmc_kshot(spec: PosteriorSpec, cfg: HmcConfig | None = None) -> HmcResult:
    """Leapfrog HMC over the flattened weight matrix.

    Warmup adapts the step size by dual averaging toward ``target_accept``
    (Nesterov-style averaging: mu = log(10 * eps0), gamma 0.05, t0 10,
    kappa 0.75); sampling then runs at the averaged step size.
    """
    cfg = cfg or HmcConfig()
    p = spec.dim
    dim = spec.way * p
    rng = rng_stream(cfg.seed)

    def potential(w_flat):
        # divergent trajectories surface as +inf energy, not exceptions
        if not np.all(np.isfinite(w_flat)):
            return np.inf, np.zeros_like(w_flat).reshape(spec.way, p)
        try:
            with np.errstate(all="ignore"):
                return neg_log_posterior(spec, w_flat.reshape(spec.way, p))
        except NumericError:
            return np.inf, np.zeros((spec.way, p))

    def grad_fn(w_flat):
        return potential(w_flat)[1].ravel()

    w = _init_weights(spec, "prior_mean").ravel().astype(float)
    step = cfg.init_step
    mu = np.log(10 * step)
    log_eps_bar, h_bar = 0.0, 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    samples = np.empty((cfg.n_samples, spec.way, p))
    accepts = []
    u_value = potential(w)[0]
    total = cfg.n_warmup + cfg.n_samples
    for m in range(total):
        r0 = rng.standard_normal(dim)
        w_new, r_new = _leapfrog(grad_fn, w, r0, step, cfg.leapfrog_steps)
        u_new = potential(w_new)[0]
        with np.errstate(all="ignore"):
            log_alpha = (u_value + 0.5 * r0 @ r0) - (u_new + 0.5 * r_new @ r_new)
        if np.isfinite(log_alpha):
            alpha = float(np.exp(min(log_alpha, 0.0)))
        else:
            alpha = 0.0
        if rng.random() < alpha:
            w, u_value = w_new, u_new
        if m < cfg.n_warmup:
            t = m + 1
            h_bar = (1 - 1 / (t + t0)) * h_bar + (cfg.target_accept - alpha) / (t + t0)
            log_eps = mu - np.sqrt(t) / gamma * h_bar
            eta = t ** (-kappa)
            log_eps_bar = eta * log_eps + (1 - eta) * log_eps_bar
            step = float(np.exp(log_eps))
            if m == cfg.n_warmup - 1:
                step = float(np.exp(log_eps_bar))
        else:
            samples[m - cfg.n_warmup] = w.reshape(spec.way, p)
            accepts.append(alpha)
    accept_rate = float(np.mean(accepts))
    if accept_rate < 0.1:
        raise NumericError(
            f"HMC acceptance rate {accept_rate:.3f} < 0.1 after warmup; "
            "retry with a smaller init_step"
        )
    return HmcResult(
        predictor=Predictor(samples=samples), accept_rate=accept_rate, step_size=step
    )


def predict(predictor: Predictor, query) -> np.ndarray:
    """Class probabilities: softmax rows for a point weight matrix, or the
    arithmetic mean of per-draw softmax rows for a sampled posterior."""
    X = query.features if isinstance(query, FeatureTable) else np.asarray(query, float)
    if predictor.point is not None:
        return predict_point(predictor.point, X)
    probs = np.zeros((X.shape[0], predictor.samples.shape[1]))
    for W in predictor.samples:
        probs += predict_point(W, X)
    return probs / len(predictor.samples)


# ---------------------------------------------------------------------------
# Baselines


def reg_from_weights(wtilde, about: str = "mean") -> float:
    """Regularization constant 2 * empirical variance of the trained weight
    entries, about their mean or about zero."""
    W = _rows(wtilde)
    if W.size < 2:
        raise ValueError("need at least 2 weight entries")
    center = W.mean() if about == "mean" else 0.0
    var = float(np.mean((W - center) ** 2))
    if var <= 0:
        raise ValueError("zero weight variance")
    return 2.0 * var


def _fit_penalized_softmax(
    X: np.ndarray, y: np.ndarray, way: int, inv_c: float, max_iters: int = 500
):
    """Minimize sum CE + inv_c * ||W||_F^2 from W = 0."""
    p = X.shape[1]

    def objective(w_flat):
        W = w_flat.reshape(way, p)
        value, grad = xent_sum(W, X, y)
        value += inv_c * float(np.sum(W * W))
        grad = grad + 2.0 * inv_c * W
        return value, grad.ravel()

    res = scipy.optimize.minimize(
        objective,
        np.zeros(way * p),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iters, "maxcor": 10, "gtol": 1e-10, "ftol": 1e-16},
    )
    return res.x.reshape(way, p), bool(res.success)


def _stratified_folds(y: np.ndarray, n_folds: int) -> list[np.ndarray]:
    """Deterministic per-class round-robin fold assignment."""
    assign = np.empty(len(y), dtype=int)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        assign[idx] = np.arange(len(idx)) % n_folds
    return [np.flatnonzero(assign == f) for f in range(n_folds)]


class LogisticBaseline(BaseEstimator, ClassifierMixin):
    """Softmax regression with the regularization schemes used as baselines.

    reg: "mle" (no penalty, iteration-capped), "fixed" (penalty (1/C)||W||^2,
    the MAP of a zero-mean isotropic Gaussian with variance C/2),
    "from_weights" (C = 2 * variance of wtilde entries), or "cv"
    (per-class-stratified fold selection of C from a grid by mean validation
    accuracy, ties resolved toward the larger C; rejected for k = 1).
    """

    def __init__(
        self,
        reg: str = "fixed",
        C: float | None = None,
        wtilde=None,
        variance_about: str = "mean",
        folds: int | None = None,
        grid=DEFAULT_CV_GRID,
        max_iters: int = 500,
    ):
        self.reg = reg
        self.C = C
        self.wtilde = wtilde
        self.variance_about = variance_about
        self.folds = folds
        self.grid = grid
        self.max_iters = max_iters

    def _fit_with_c(self, X, y, way, c):
        return _fit_penalized_softmax(X, y, way, 1.0 / c, self.max_iters)

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        way = len(self.classes_)
        y_local = np.searchsorted(self.classes_, y)
        self.warning_ = None
        if self.reg == "mle":
            self.coef_, ok = _fit_penalized_softmax(X, y_local, way, 0.0, self.max_iters)
            final_nll, _ = xent_sum(self.coef_, X, y_local)
            if not ok or final_nll < 1e-6:
                # near-zero training loss means the data are separable and the
                # true unpenalized optimum lies at infinity
                self.warning_ = "mle fit did not converge (separable data?)"
        elif self.reg == "fixed":
            if self.C is None or self.C <= 0:
                raise ValueError("fixed regularization needs C > 0")
            self.C_ = float(self.C)
            self.coef_, _ = self._fit_with_c(X, y_local, way, self.C_)
        elif self.reg == "from_weights":
            self.C_ = reg_from_weights(self.wtilde, about=self.variance_about)
            self.coef_, _ = self._fit_with_c(X, y_local, way, self.C_)
        elif self.reg == "cv":
            k = int(np.bincount(y_local).min())
            if k < 2:
                raise CvInapplicableError(
                    "cross-validation is not applicable with a single example per class"
                )
            n_folds = self.folds if self.folds is not None else min(k, 5)
            folds = _stratified_folds(y_local, n_folds)
            grid = sorted(float(c) for c in self.grid)
            scores = []
            for c in grid:
                accs = []
                for f, val_idx in enumerate(folds):
                    train_idx = np.concatenate(
                        [folds[g] for g in range(n_folds) if g != f]
                    )
                    W, _ = self._fit_with_c(X[train_idx], y_local[train_idx], way, c)
                    pred = predict_point(W, X[val_idx]).argmax(axis=1)
                    accs.append(float(np.mean(pred == y_local[val_idx])))
                scores.append(np.mean(accs))
            # ties toward larger C: scan from the largest value down
            best = max(range(len(grid)), key=lambda i: (scores[i], grid[i]))
            self.C_ = grid[best]
            self.cv_scores_ = dict(zip(grid, scores))
            self.coef_, _ = self._fit_with_c(X, y_local, way, self.C_)
        else:
            raise ValueError(f"unknown reg scheme {self.reg!r}")
        return self

    def predict_proba(self, X):
        return predict_point(self.coef_, np.asarray(X, dtype=float))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


def logreg_baseline(support: FeatureTable, reg: str = "fixed", **kwargs) -> WeightMatrix:
    model = LogisticBaseline(reg=reg, **kwargs).fit(support.features, support.labels)
    return WeightMatrix(model.coef_, model.classes_)


class CosineNearestNeighbor(BaseEstimator, ClassifierMixin):
    """Max-cosine-similarity labeling with one-hot pseudo-probabilities.

    Probabilities are one-hot clamped at 1e-12 so NLL is reportable; they are
    not calibrated.  Ties resolve to the lowest class id.
    """

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        norms = np.linalg.norm(X, axis=1)
        bad = np.flatnonzero(norms == 0)
        if len(bad):
            raise ValueError(f"zero-norm support vector at row {bad[0]}")
        order = np.argsort(np.asarray(y), kind="stable")
        self.classes_ = np.unique(y)
        self._support = X[order] / norms[order][:, None]
        self._support_local = np.searchsorted(self.classes_, np.asarray(y)[order])
        return self

    def predict_proba(self, X):
        X = np.asarray(X, dtype=float)
        norms = np.linalg.norm(X, axis=1)
        bad = np.flatnonzero(norms == 0)
        if len(bad):
            raise ValueError(f"zero-norm query vector at row {bad[0]}")
        sims = (X / norms[:, None]) @ self._support.T
        way = len(self.classes_)
        # per-class best similarity; argmax returns the first (lowest id) on ties
        per_class = np.full((X.shape[0], way), -np.inf)
        for c in range(way):
            cols = self._support_local == c
            per_class[:, c] = sims[:, cols].max(axis=1)
        winners = per_class.argmax(axis=1)
        probs = np.full((X.shape[0], way), NN_PROB_FLOOR)
        probs[np.arange(len(winners)), winners] = 1.0 - (way - 1) * NN_PROB_FLOOR
        return probs

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


def nearest_neighbor(
    support: FeatureTable, query: FeatureTable
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class ids and pseudo-probabilities for the query rows."""
    model = CosineNearestNeighbor().fit(support.features, support.labels)
    probs = model.predict_proba(query.features)
    return model.classes_[probs.argmax(axis=1)], probs


class PriorSoftmaxClassifier(BaseEstimator, ClassifierMixin):
    """Few-shot classifier that learns softmax weights under a weight prior.

    ``inference`` is "map" (point estimate) or "hmc" (posterior-averaged
    predictions).
    """

    def __init__(
        self,
        prior: WeightPrior,
        inference: str = "map",
        optimizer: OptimizerConfig | None = None,
        hmc: HmcConfig | None = None,
    ):
        self.prior = prior
        self.inference = inference
        self.optimizer = optimizer
        self.hmc = hmc

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        y_local = np.searchsorted(self.classes_, y)
        spec = PosteriorSpec(prior=self.prior, way=len(self.classes_), X=X, y=y_local)
        if self.inference == "map":
            result = map_kshot(spec, self.optimizer)
            self.predictor_ = Predictor(point=result.weights)
            self.map_result_ = result
        elif self.inference == "hmc":
            result = hmc_kshot(spec, self.hmc)
            self.predictor_ = result.predictor
            self.hmc_result_ = result
        else:
            raise ValueError("inference must be 'map' or 'hmc'")
        return self

    def predict_proba(self, X):
        return predict(self.predictor_, np.asarray(X, dtype=float))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
