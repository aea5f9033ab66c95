"""Probabilistic models of softmax weight rows.

Fits densities to the rows of a trained base-class weight matrix and exposes
per-row log-density plus gradient, so they can act as priors when learning
new-class weights.  Model kinds: Gaussian (isotropic / diagonal / full, with a
conjugate Normal-inverse-Wishart treatment giving a Student-t predictive),
mixtures of Gaussians fit by EM, and Laplace (diagonal / isotropic).

Conventions: all variance estimates use the population divisor (N, not N-1);
medians of even counts are midpoints of the two central order statistics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import gammaln, logsumexp
from sklearn.base import BaseEstimator

from .data import WeightMatrix, rng_stream
from .exceptions import NumericError

COV_KINDS = ("isotropic", "diagonal", "full")

# Lower bound on per-dimension GMM variances, prevents component collapse.
GMM_VARIANCE_FLOOR = 1e-8


def _rows(W) -> np.ndarray:
    if isinstance(W, WeightMatrix):
        return W.rows
    arr = np.asarray(W, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


# ---------------------------------------------------------------------------
# Normal-inverse-Wishart


@dataclass(frozen=True)
class NIWParams:
    """Normal-inverse-Wishart hyperparameters (mu0, kappa0, lambda0, nu0)."""

    mu0: np.ndarray
    kappa0: float
    lambda0: np.ndarray
    nu0: float

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        lam = np.atleast_2d(np.asarray(self.lambda0, dtype=float))
        p = len(mu0)
        if lam.shape != (p, p):
            raise ValueError("lambda0 must be p x p")
        if not np.allclose(lam, lam.T, atol=1e-12):
            raise ValueError("lambda0 must be symmetric")
        if np.linalg.eigvalsh(lam).min() <= 0:
            raise ValueError("lambda0 must be positive definite")
        if self.kappa0 <= 0:
            raise ValueError("kappa0 must be positive")
        if self.nu0 <= p - 1:
            raise ValueError(f"nu0 must exceed p-1 = {p - 1}")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "lambda0", lam)

    @property
    def dim(self) -> int:
        return len(self.mu0)


def default_niw_prior(
    wtilde, kappa0: float = 0.01, nu0: float | None = None, lambda0_scale: float | None = None
) -> NIWParams:
    """Data-dependent hyperparameters: mu0 = column mean, nu0 = p + 2,
    lambda0 = p * pooled-variance * I."""
    W = _rows(wtilde)
    p = W.shape[1]
    mu0 = W.mean(axis=0)
    pooled = float(np.mean((W - mu0) ** 2))
    scale = lambda0_scale if lambda0_scale is not None else p * pooled
    return NIWParams(
        mu0=mu0,
        kappa0=kappa0,
        lambda0=scale * np.eye(p),
        nu0=nu0 if nu0 is not None else p + 2,
    )


def niw_posterior(prior: NIWParams, wtilde) -> NIWParams:
    """Conjugate update of NIW hyperparameters given observed weight rows."""
    W = _rows(wtilde)
    if W.size == 0:
        return prior
    n, p = W.shape
    if p != prior.dim:
        raise ValueError(f"weight dimension {p} != prior dimension {prior.dim}")
    wbar = W.mean(axis=0)
    centered = W - wbar
    scatter = centered.T @ centered
    kappa_n = prior.kappa0 + n
    mu_n = (prior.kappa0 * prior.mu0 + n * wbar) / kappa_n
    diff = (wbar - prior.mu0)[:, None]
    lambda_n = (
        prior.lambda0 + scatter + (prior.kappa0 * n / kappa_n) * (diff @ diff.T)
    )
    return NIWParams(mu0=mu_n, kappa0=kappa_n, lambda0=lambda_n, nu0=prior.nu0 + n)


def niw_map(params: NIWParams) -> "GaussianWeightPrior":
    """Joint mode of the NIW: mean mu_N, covariance Lambda_N / (nu_N + p + 2)."""
    p = params.dim
    cov = params.lambda0 / (params.nu0 + p + 2)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise NumericError("NIW MAP covariance is not positive definite")
    return GaussianWeightPrior.from_params(params.mu0, cov, cov_kind="full")


def student_t_predictive(params: NIWParams) -> "StudentTWeightPrior":
    """Closed-form predictive over a new weight row after integrating out the
    Gaussian's mean and covariance."""
    p = params.dim
    dof = params.nu0 - p + 1
    if dof <= 0:
        raise ValueError(f"predictive dof nu - p + 1 = {dof} must be positive (nu={params.nu0}, p={p})")
    scale = params.lambda0 * (params.kappa0 + 1) / (params.kappa0 * dof)
    return StudentTWeightPrior(dof=dof, location=params.mu0, scale=scale)


# ---------------------------------------------------------------------------
# Priors


class WeightPrior(BaseEstimator):
    """Common surface: per-row log-density, summed log-density with gradient,
    and a location vector used to initialize downstream optimizers."""

    def log_density_rows(self, W) -> np.ndarray:
        raise NotImplementedError

    def grad_rows(self, W) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, W) -> tuple[float, np.ndarray]:
        rows = _rows(W)
        return float(self.log_density_rows(rows).sum()), self.grad_rows(rows)

    @property
    def init_location(self) -> np.ndarray:
        raise NotImplementedError


class GaussianWeightPrior(WeightPrior):
    """Gaussian over weight rows with isotropic, diagonal, or full covariance.

    Fitting uses maximum likelihood with the population divisor; full
    covariances get a small ridge when the row count does not exceed the
    dimension.
    """

    def __init__(self, cov_kind: str = "isotropic"):
        self.cov_kind = cov_kind

    def fit(self, W, y=None):
        W = _rows(W)
        if self.cov_kind not in COV_KINDS:
            raise ValueError(f"cov_kind must be one of {COV_KINDS}")
        n, p = W.shape
        if n < 2:
            raise ValueError("need at least 2 weight rows to fit a Gaussian")
        self.mean_ = W.mean(axis=0)
        centered = W - self.mean_
        if self.cov_kind == "isotropic":
            var = float(np.mean(centered**2))
            if var <= 0:
                raise ValueError("zero pooled variance; cannot fit isotropic Gaussian")
            self.variance_ = var
        elif self.cov_kind == "diagonal":
            var = np.mean(centered**2, axis=0)
            bad = np.flatnonzero(var <= 0)
            if len(bad):
                raise ValueError(f"zero variance in dimension {bad[0]}")
            self.variances_ = var
        else:
            cov = centered.T @ centered / n
            if n <= p:
                cov = cov + (1e-6 * np.trace(cov) / p) * np.eye(p)
            try:
                self._set_full_cov(cov)
            except np.linalg.LinAlgError:
                raise ValueError("sample covariance is singular") from None
            self.covariance_ = cov
        self.dim_ = p
        return self

    def _set_full_cov(self, cov: np.ndarray):
        self._chol = np.linalg.cholesky(cov)
        self._logdet = 2.0 * float(np.log(np.diag(self._chol)).sum())

    @classmethod
    def from_params(cls, mean, cov, cov_kind: str = "isotropic") -> "GaussianWeightPrior":
        self = cls(cov_kind=cov_kind)
        self.mean_ = np.atleast_1d(np.asarray(mean, dtype=float))
        self.dim_ = len(self.mean_)
        if cov_kind == "isotropic":
            if cov <= 0:
                raise ValueError("variance must be positive")
            self.variance_ = float(cov)
        elif cov_kind == "diagonal":
            v = np.asarray(cov, dtype=float)
            if np.any(v <= 0):
                raise ValueError("diagonal variances must be positive")
            self.variances_ = v
        elif cov_kind == "full":
            c = np.atleast_2d(np.asarray(cov, dtype=float))
            self._set_full_cov(c)
            self.covariance_ = c
        else:
            raise ValueError(f"cov_kind must be one of {COV_KINDS}")
        return self

    def log_density_rows(self, W) -> np.ndarray:
        W = _rows(W)
        d = W - self.mean_
        p = self.dim_
        if self.cov_kind == "isotropic":
            return -0.5 * (
                p * np.log(2 * np.pi * self.variance_) + (d**2).sum(axis=1) / self.variance_
            )
        if self.cov_kind == "diagonal":
            return -0.5 * (
                np.log(2 * np.pi * self.variances_).sum() + (d**2 / self.variances_).sum(axis=1)
            )
        sol = scipy.linalg.cho_solve((self._chol, True), d.T).T
        return -0.5 * (p * np.log(2 * np.pi) + self._logdet + (d * sol).sum(axis=1))

    def grad_rows(self, W) -> np.ndarray:
        W = _rows(W)
        d = W - self.mean_
        if self.cov_kind == "isotropic":
            return -d / self.variance_
        if self.cov_kind == "diagonal":
            return -d / self.variances_
        return -scipy.linalg.cho_solve((self._chol, True), d.T).T

    @property
    def init_location(self) -> np.ndarray:
        return self.mean_


class StudentTWeightPrior(WeightPrior):
    """Multivariate Student-t over weight rows (NIW predictive form)."""

    def __init__(self, dof: float, location, scale):
        if dof <= 0:
            raise ValueError("dof must be positive")
        self.dof = float(dof)
        self.location = np.atleast_1d(np.asarray(location, dtype=float))
        self.scale = np.atleast_2d(np.asarray(scale, dtype=float))
        self._chol = np.linalg.cholesky(self.scale)
        self._logdet = 2.0 * float(np.log(np.diag(self._chol)).sum())

    def log_density_rows(self, W) -> np.ndarray:
        W = _rows(W)
        p = len(self.location)
        d = W - self.location
        m = (d * scipy.linalg.cho_solve((self._chol, True), d.T).T).sum(axis=1)
        nu = self.dof
        return (
            gammaln((nu + p) / 2)
            - gammaln(nu / 2)
            - 0.5 * p * np.log(nu * np.pi)
            - 0.5 * self._logdet
            - 0.5 * (nu + p) * np.log1p(m / nu)
        )

    def grad_rows(self, W) -> np.ndarray:
        W = _rows(W)
        p = len(self.location)
        d = W - self.location
        sol = scipy.linalg.cho_solve((self._chol, True), d.T).T
        m = (d * sol).sum(axis=1)
        coef = (self.dof + p) / (self.dof + m)
        return -coef[:, None] * sol

    @property
    def init_location(self) -> np.ndarray:
        return self.location


class LaplaceWeightPrior(WeightPrior):
    """Product of independent Laplace densities, diagonal or isotropic.

    MLE fit: location = median, scale = mean absolute deviation about it.
    The gradient uses subgradient 0 at non-differentiable points.
    """

    def __init__(self, kind: str = "diagonal"):
        self.kind = kind

    def fit(self, W, y=None):
        W = _rows(W)
        if self.kind not in ("diagonal", "isotropic"):
            raise ValueError("kind must be 'diagonal' or 'isotropic'")
        if W.shape[0] < 2:
            raise ValueError("need at least 2 weight rows to fit a Laplace model")
        if self.kind == "diagonal":
            loc = np.median(W, axis=0)
            scale = np.mean(np.abs(W - loc), axis=0)
            bad = np.flatnonzero(scale <= 0)
            if len(bad):
                raise ValueError(f"zero scale in dimension {bad[0]}")
        else:
            mu = float(np.median(W))
            lam = float(np.mean(np.abs(W - mu)))
            if lam <= 0:
                raise ValueError("zero scale; all entries equal")
            loc = np.full(W.shape[1], mu)
            scale = np.full(W.shape[1], lam)
        self.location_ = loc
        self.scale_ = scale
        self.dim_ = W.shape[1]
        return self

    @classmethod
    def from_params(cls, location, scale, kind: str = "diagonal") -> "LaplaceWeightPrior":
        self = cls(kind=kind)
        self.location_ = np.atleast_1d(np.asarray(location, dtype=float))
        self.scale_ = np.broadcast_to(
            np.asarray(scale, dtype=float), self.location_.shape
        ).copy()
        if np.any(self.scale_ <= 0):
            raise ValueError("scales must be positive")
        self.dim_ = len(self.location_)
        return self

    def log_density_rows(self, W) -> np.ndarray:
        W = _rows(W)
        return (
            -np.log(2 * self.scale_).sum()
            - (np.abs(W - self.location_) / self.scale_).sum(axis=1)
        )

    def grad_rows(self, W) -> np.ndarray:
        W = _rows(W)
        return -np.sign(W - self.location_) / self.scale_

    @property
    def init_location(self) -> np.ndarray:
        return self.location_


class GmmWeightPrior(WeightPrior):
    """Mixture of Gaussians over weight rows, fit by EM.

    ``init`` is either "random" (seeded: component means drawn from the rows)
    or "label_groups" with ``label_groups`` giving a group id per row; the
    group assignment seeds the first M-step as hard responsibilities.
    Components share a covariance kind and are floored per dimension to avoid
    collapse.  On an emptied component the fit restarts with a fresh seed, up
    to ``n_restarts`` times.
    """

    def __init__(
        self,
        n_components: int = 3,
        cov_kind: str = "isotropic",
        init: str = "random",
        label_groups=None,
        max_iter: int = 200,
        tol: float = 1e-7,
        seed: int = 0,
        n_restarts: int = 3,
    ):
        self.n_components = n_components
        self.cov_kind = cov_kind
        self.init = init
        self.label_groups = label_groups
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed
        self.n_restarts = n_restarts

    # -- component density helpers (vectorized over components) --

    def _component_logpdf(self, W: np.ndarray) -> np.ndarray:
        """(n, S) per-component log N(w | mu_s, Sigma_s)."""
        return np.column_stack(
            [comp.log_density_rows(W) for comp in self.components_]
        )

    def _m_step(self, W: np.ndarray, resp: np.ndarray):
        n, p = W.shape
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-12):
            raise _EmptyComponent()
        self.weights_ = nk / n
        comps = []
        for s in range(resp.shape[1]):
            r = resp[:, s]
            mu = (r[:, None] * W).sum(axis=0) / nk[s]
            d = W - mu
            if self.cov_kind == "isotropic":
                var = max(float((r[:, None] * d**2).sum() / (nk[s] * p)), GMM_VARIANCE_FLOOR)
                comps.append(GaussianWeightPrior.from_params(mu, var, "isotropic"))
            elif self.cov_kind == "diagonal":
                var = np.maximum((r[:, None] * d**2).sum(axis=0) / nk[s], GMM_VARIANCE_FLOOR)
                comps.append(GaussianWeightPrior.from_params(mu, var, "diagonal"))
            else:
                cov = (r[:, None] * d).T @ d / nk[s]
                if n <= p:
                    cov = cov + (1e-6 * np.trace(cov) / p) * np.eye(p)
                try:
                    comps.append(GaussianWeightPrior.from_params(mu, cov, "full"))
                except np.linalg.LinAlgError:
                    cov = cov + GMM_VARIANCE_FLOOR * np.eye(p)
                    comps.append(GaussianWeightPrior.from_params(mu, cov, "full"))
        self.components_ = comps

    def _init_random(self, W: np.ndarray, seed: int):
        rng = rng_stream(seed)
        n, p = W.shape
        idx = rng.choice(n, size=self.n_components, replace=False)
        global_var = max(float(np.mean((W - W.mean(axis=0)) ** 2)), GMM_VARIANCE_FLOOR)
        comps = []
        for i in idx:
            if self.cov_kind == "isotropic":
                comps.append(GaussianWeightPrior.from_params(W[i], global_var, "isotropic"))
            elif self.cov_kind == "diagonal":
                comps.append(
                    GaussianWeightPrior.from_params(W[i], np.full(p, global_var), "diagonal")
                )
            else:
                comps.append(
                    GaussianWeightPrior.from_params(W[i], global_var * np.eye(p), "full")
                )
        self.components_ = comps
        self.weights_ = np.full(self.n_components, 1.0 / self.n_components)

    def _init_label_groups(self, W: np.ndarray):
        groups = np.asarray(self.label_groups)
        if groups.shape != (W.shape[0],):
            raise ValueError("label_groups must give one group id per weight row")
        uniq = np.unique(groups)
        if len(uniq) != self.n_components:
            raise ValueError(
                f"label_groups has {len(uniq)} groups but n_components={self.n_components}"
            )
        resp = (groups[:, None] == uniq[None, :]).astype(float)
        self._m_step(W, resp)

    def fit(self, W, y=None):
        W = _rows(W)
        if self.cov_kind not in COV_KINDS:
            raise ValueError(f"cov_kind must be one of {COV_KINDS}")
        if W.shape[0] < self.n_components:
            raise ValueError("need at least one weight row per component")
        last_err = None
        for attempt in range(self.n_restarts):
            try:
                self._fit_once(W, self.seed + attempt)
                return self
            except _EmptyComponent:
                last_err = NumericError(
                    f"EM component emptied after {self.n_restarts} restarts"
                )
                if self.init == "label_groups":
                    break
        raise last_err

    def _fit_once(self, W: np.ndarray, seed: int):
        if self.init == "label_groups":
            self._init_label_groups(W)
        elif self.init == "random":
            self._init_random(W, seed)
        else:
            raise ValueError("init must be 'random' or 'label_groups'")
        self.loglik_path_ = []
        prev = -np.inf
        for _ in range(self.max_iter):
            joint = self._component_logpdf(W) + np.log(self.weights_)
            total = logsumexp(joint, axis=1)
            loglik = float(total.sum())
            self.loglik_path_.append(loglik)
            resp = np.exp(joint - total[:, None])
            self._m_step(W, resp)
            if loglik - prev < self.tol and np.isfinite(prev):
                break
            prev = loglik
        self.converged_ = len(self.loglik_path_) < self.max_iter
        return self

    def responsibilities(self, W) -> np.ndarray:
        W = _rows(W)
        joint = self._component_logpdf(W) + np.log(self.weights_)
        return np.exp(joint - logsumexp(joint, axis=1)[:, None])

    def log_density_rows(self, W) -> np.ndarray:
        W = _rows(W)
        if len(self.components_) == 1:
            return self.components_[0].log_density_rows(W)
        return logsumexp(self._component_logpdf(W) + np.log(self.weights_), axis=1)

    def grad_rows(self, W) -> np.ndarray:
        W = _rows(W)
        resp = self.responsibilities(W)
        grad = np.zeros_like(W)
        for s, comp in enumerate(self.components_):
            grad += resp[:, s : s + 1] * comp.grad_rows(W)
        return grad

    @property
    def init_location(self) -> np.ndarray:
        return self.components_[int(np.argmax(self.weights_))].mean_


class _EmptyComponent(Exception):
    pass


# ---------------------------------------------------------------------------
# Functional fitting surface


def fit_gaussian(wtilde, cov_kind: str = "isotropic") -> GaussianWeightPrior:
    return GaussianWeightPrior(cov_kind=cov_kind).fit(_rows(wtilde))


def fit_gmm(
    wtilde,
    n_components: int,
    cov_kind: str = "isotropic",
    init: str = "random",
    label_groups=None,
    max_iter: int = 200,
    tol: float = 1e-7,
    seed: int = 0,
) -> GmmWeightPrior:
    return GmmWeightPrior(
        n_components=n_components,
        cov_kind=cov_kind,
        init=init,
        label_groups=label_groups,
        max_iter=max_iter,
        tol=tol,
        seed=seed,
    ).fit(_rows(wtilde))


def fit_laplace(wtilde, kind: str = "diagonal") -> LaplaceWeightPrior:
    return LaplaceWeightPrior(kind=kind).fit(_rows(wtilde))


def log_prior_density(prior: WeightPrior, W) -> tuple[float, np.ndarray]:
    """Summed log-density over the rows of W and its gradient."""
    return prior.log_density(W)


@dataclass(frozen=True)
class HeldoutResult:
    mean: float
    sem: float
    per_split: np.ndarray
    n_failed: int


def heldout_logprob(
    wtilde, fit_fn, n_heldout: int, n_splits: int, seed: int = 0
) -> HeldoutResult:
    """Mean +/- sem of summed held-out row log-density over seeded random
    splits.  ``fit_fn`` maps a (train rows) array to a fitted prior.  Splits
    whose fit fails are skipped; a warning fires if more than 20% fail.
    """
    W = _rows(wtilde)
    n = W.shape[0]
    if not (n > n_heldout >= 1):
        raise ValueError("need n_rows > n_heldout >= 1")
    if n_splits < 2:
        raise ValueError("need at least 2 splits")
    scores = []
    n_failed = 0
    for split in range(n_splits):
        rng = rng_stream(seed, stream=split + 1)
        perm = rng.permutation(n)
        held, train = perm[:n_heldout], perm[n_heldout:]
        try:
            model = fit_fn(W[train])
            scores.append(float(model.log_density_rows(W[held]).sum()))
        except (ValueError, NumericError):
            n_failed += 1
    if n_failed > 0.2 * n_splits:
        warnings.warn(
            f"{n_failed}/{n_splits} held-out splits failed to fit", stacklevel=2
        )
    arr = np.asarray(scores)
    sem = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else float("nan")
    return HeldoutResult(mean=float(arr.mean()), sem=sem, per_split=arr, n_failed=n_failed)
