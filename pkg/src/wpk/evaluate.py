"""Episodic evaluation harness, regularization sweep, and online protocol.

Every method in one benchmark run sees the identical seeded episode
sequence.  Per-task metrics feed the reported standard errors; calibration
pools query points across all tasks.  Episodes are independent work items
and can be fanned out across processes; results reduce in task order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
from joblib import Parallel, delayed

from .data import FeatureTable, WeightMatrix, rng_stream, sample_episode
from .exceptions import NumericError, WpkError
from .inference import OptimizerConfig
from .metrics import accuracy, calibration_curve, ece, nll
from .priors import WeightPrior
from .softmax import predict_point, xent_sum


@dataclass(frozen=True)
class Protocol:
    n_tasks: int = 600
    way: int = 5
    shots: tuple = (1, 5)
    n_query: int = 15
    base_seed: int = 0

    def __post_init__(self):
        if min(self.n_tasks, self.way, self.n_query, *self.shots) < 1:
            raise ValueError("protocol counts must be >= 1")
        object.__setattr__(self, "shots", tuple(int(k) for k in self.shots))


def episode_seed(base_seed: int, k_index: int, task_index: int) -> int:
    """Deterministic per-episode Philox key: the base seed in the high bits,
    the shot index and task index below it."""
    return (base_seed << 64) | (k_index << 32) | task_index


@dataclass(frozen=True)
class CalibrationReport:
    accuracy: float
    accuracy_sem: float
    mean_nll: float
    nll_sem: float
    ece: float
    bins: list
    n_points: int
    n_failed: int = 0
    per_task_accuracy: np.ndarray = field(default=None, repr=False)
    per_task_nll: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_sem": self.accuracy_sem,
            "mean_nll": self.mean_nll,
            "nll_sem": self.nll_sem,
            "ece": self.ece,
            "bins": [list(b) for b in self.bins],
            "n_points": self.n_points,
            "n_failed": self.n_failed,
        }


def _sem(values: np.ndarray) -> float:
    if len(values) < 2:
        return float("nan")
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def _run_methods_on_episode(methods: dict, episode) -> dict:
    """Fit each method on the episode support and score its query; a method
    failure is recorded rather than raised."""
    out = {}
    sup, qry = episode.support, episode.query
    classes = np.unique(sup.labels)
    y_query = np.searchsorted(classes, qry.labels)
    for name, factory in methods.items():
        try:
            model = factory()
            model.fit(sup.features, sup.labels)
            probs = model.predict_proba(qry.features)
            out[name] = ("ok", probs, y_query)
        except (WpkError, ValueError, np.linalg.LinAlgError) as exc:
            out[name] = ("failed", str(exc), None)
    return out


def run_benchmark(
    novel: FeatureTable,
    methods: dict,
    protocol: Protocol,
    n_bins: int = 10,
    workers: int = 1,
) -> dict:
    """Evaluate every method on the identical seeded episode sequence.

    ``methods`` maps names to zero-argument factories returning fresh
    estimators with fit/predict_proba.  Returns
    {method: {k: CalibrationReport}}.
    """
    reports: dict = {name: {} for name in methods}
    for k_index, k in enumerate(protocol.shots):
        episodes = [
            sample_episode(
                novel,
                protocol.way,
                k,
                protocol.n_query,
                episode_seed(protocol.base_seed, k_index, t),
            )
            for t in range(protocol.n_tasks)
        ]
        if workers != 1:
            results = Parallel(n_jobs=workers)(
                delayed(_run_methods_on_episode)(methods, ep) for ep in episodes
            )
        else:
            results = [_run_methods_on_episode(methods, ep) for ep in episodes]
        for name in methods:
            accs, nlls, all_probs, all_labels = [], [], [], []
            n_failed = 0
            for res in results:
                status, probs, y_query = res[name]
                if status == "failed":
                    n_failed += 1
                    continue
                accs.append(accuracy(probs, y_query))
                nlls.append(nll(probs, y_query))
                all_probs.append(probs)
                all_labels.append(y_query)
            if not all_probs:
                # every episode failed for this method (e.g. CV at k = 1)
                reports[name][k] = CalibrationReport(
                    accuracy=float("nan"),
                    accuracy_sem=float("nan"),
                    mean_nll=float("nan"),
                    nll_sem=float("nan"),
                    ece=float("nan"),
                    bins=[],
                    n_points=0,
                    n_failed=n_failed,
                    per_task_accuracy=np.empty(0),
                    per_task_nll=np.empty(0),
                )
                continue
            pooled = np.vstack(all_probs)
            labels = np.concatenate(all_labels)
            accs = np.asarray(accs)
            nlls = np.asarray(nlls)
            reports[name][k] = CalibrationReport(
                accuracy=float(accs.mean()),
                accuracy_sem=_sem(accs),
                mean_nll=float(nlls.mean()),
                nll_sem=_sem(nlls),
                ece=ece(pooled, labels, n_bins),
                bins=calibration_curve(pooled, labels, n_bins),
                n_points=len(labels),
                n_failed=n_failed,
                per_task_accuracy=accs,
                per_task_nll=nlls,
            )
    return reports


def reg_sweep(
    novel: FeatureTable,
    wtilde: WeightMatrix,
    protocol: Protocol,
    grid,
    workers: int = 1,
) -> dict:
    """Logistic-regression grid sweep plus the weights-derived constant, all
    on identical episodes.  Returns {"grid": {C: {k: report}},
    "from_weights": {"C": value, "reports": {k: report}}}."""
    from .inference import LogisticBaseline, reg_from_weights

    grid = [float(c) for c in grid]
    if not grid:
        raise ValueError("grid must be non-empty")
    methods = {
        f"C={c:g}": (lambda c=c: LogisticBaseline(reg="fixed", C=c)) for c in grid
    }
    c_star = reg_from_weights(wtilde)
    methods["from_weights"] = lambda: LogisticBaseline(reg="fixed", C=c_star)
    reports = run_benchmark(novel, methods, protocol, workers=workers)
    return {
        "grid": {c: reports[f"C={c:g}"] for c in grid},
        "from_weights": {"C": c_star, "reports": reports["from_weights"]},
    }


# ---------------------------------------------------------------------------
# Online (joint old + new softmax) evaluation


@dataclass(frozen=True)
class OnlineMethodSpec:
    """How new-class weights are learned in the online setting.

    prior: weight prior for the MAP objective, or None for logistic
    regression; C: fixed regularization constant (None with prior=None means
    unregularized MLE); mode: "joint" trains under the combined softmax with
    the old rows fixed, "only_new" trains on the new classes alone and only
    evaluates jointly.
    """

    prior: WeightPrior | None = None
    C: float | None = None
    mode: str = "joint"


@dataclass(frozen=True)
class OnlineReport:
    acc_all: float
    acc_all_sem: float
    acc_old: float
    acc_old_sem: float
    acc_new: float
    acc_new_sem: float
    n_failed: int = 0

    def to_dict(self) -> dict:
        return {
            "acc_all": self.acc_all,
            "acc_all_sem": self.acc_all_sem,
            "acc_old": self.acc_old,
            "acc_old_sem": self.acc_old_sem,
            "acc_new": self.acc_new,
            "acc_new_sem": self.acc_new_sem,
            "n_failed": self.n_failed,
        }


def _fit_joint_new_weights(
    wtilde_rows: np.ndarray,
    spec: OnlineMethodSpec,
    X: np.ndarray,
    y_joint: np.ndarray,
    way: int,
    max_iters: int = 500,
):
    """Learn the new-class rows of a joint softmax, old rows held fixed."""
    n_old, p = wtilde_rows.shape

    def objective(w_flat):
        w_new = w_flat.reshape(way, p)
        W = np.vstack([wtilde_rows, w_new])
        value, grad = xent_sum(W, X, y_joint)
        grad_new = grad[n_old:]
        if spec.prior is not None:
            lp, lg = spec.prior.log_density(w_new)
            value -= lp
            grad_new = grad_new - lg
        elif spec.C is not None:
            value += (1.0 / spec.C) * float(np.sum(w_new * w_new))
            grad_new = grad_new + (2.0 / spec.C) * w_new
        return value, grad_new.ravel()

    init = (
        np.tile(spec.prior.init_location, (way, 1)).ravel()
        if spec.prior is not None
        else np.zeros(way * p)
    )
    res = scipy.optimize.minimize(
        objective,
        init,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iters, "maxcor": 10, "gtol": 1e-8, "ftol": 1e-16},
    )
    return res.x.reshape(way, p)


def joint_predict(
    wtilde_rows: np.ndarray, new_rows: np.ndarray, X: np.ndarray, mask_new: bool = False
) -> np.ndarray:
    """Probabilities under the combined softmax; ``mask_new`` suppresses the
    new classes entirely (diagnostic for forgetting-free reference)."""
    logits = X @ np.vstack([wtilde_rows, new_rows]).T
    if mask_new:
        logits[:, wtilde_rows.shape[0] :] = -np.inf
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def online_eval(
    wtilde_map: WeightMatrix,
    method: OnlineMethodSpec,
    base_test: FeatureTable,
    novel: FeatureTable,
    protocol: Protocol,
    n_base_test_per_class: int = 100,
    optimizer: OptimizerConfig | None = None,
) -> dict:
    """Joint old+new evaluation per episode: learn new-class weights with the
    old rows fixed (or standalone for "only_new"), then score accuracy on all
    classes, the old classes, and the new classes.  Returns {k: OnlineReport}.
    """
    old_ids = wtilde_map.class_ids
    if not np.array_equal(np.sort(old_ids), np.sort(base_test.class_ids)):
        raise ValueError("base_test classes must match the trained weight rows")
    if base_test.dim != wtilde_map.dim or novel.dim != wtilde_map.dim:
        raise ValueError("feature dimension mismatch with trained weights")

    # fixed seeded subsample of old-class test points, shared by all episodes
    rng = rng_stream(protocol.base_seed, stream=(1 << 20))
    keep = []
    for cid in old_ids:
        rows = base_test.class_rows(cid)
        take = min(n_base_test_per_class, len(rows))
        keep.extend(rng.choice(rows, size=take, replace=False))
    old_eval = base_test.take(np.asarray(keep))
    # old label -> row position in the fixed weight matrix
    pos = {int(c): i for i, c in enumerate(old_ids)}
    y_old_joint = np.asarray([pos[int(c)] for c in old_eval.labels])
    n_old = len(old_ids)

    out = {}
    for k_index, k in enumerate(protocol.shots):
        per_all, per_old, per_new = [], [], []
        n_failed = 0
        for t in range(protocol.n_tasks):
            ep = sample_episode(
                novel,
                protocol.way,
                k,
                protocol.n_query,
                episode_seed(protocol.base_seed, k_index, t),
            )
            classes = np.unique(ep.support.labels)
            y_sup_new = np.searchsorted(classes, ep.support.labels)
            y_qry_new = np.searchsorted(classes, ep.query.labels)
            try:
                if method.mode == "joint":
                    w_new = _fit_joint_new_weights(
                        wtilde_map.rows,
                        method,
                        ep.support.features,
                        n_old + y_sup_new,
                        ep.way,
                    )
                elif method.mode == "only_new":
                    w_new = _fit_standalone_new_weights(
                        method, ep.support.features, y_sup_new, ep.way
                    )
                else:
                    raise ValueError("mode must be 'joint' or 'only_new'")
            except (NumericError, ValueError):
                n_failed += 1
                continue
            probs_old = joint_predict(wtilde_map.rows, w_new, old_eval.features)
            probs_new = joint_predict(wtilde_map.rows, w_new, ep.query.features)
            correct_old = probs_old.argmax(axis=1) == y_old_joint
            correct_new = probs_new.argmax(axis=1) == (n_old + y_qry_new)
            per_old.append(float(correct_old.mean()))
            per_new.append(float(correct_new.mean()))
            per_all.append(
                float(
                    (correct_old.sum() + correct_new.sum())
                    / (len(correct_old) + len(correct_new))
                )
            )
        per_all, per_old, per_new = map(np.asarray, (per_all, per_old, per_new))
        out[k] = OnlineReport(
            acc_all=float(per_all.mean()),
            acc_all_sem=_sem(per_all),
            acc_old=float(per_old.mean()),
            acc_old_sem=_sem(per_old),
            acc_new=float(per_new.mean()),
            acc_new_sem=_sem(per_new),
            n_failed=n_failed,
        )
    return out


def _fit_standalone_new_weights(
    spec: OnlineMethodSpec, X: np.ndarray, y: np.ndarray, way: int
) -> np.ndarray:
    from .inference import PosteriorSpec, _fit_penalized_softmax, map_kshot

    if spec.prior is not None:
        return map_kshot(PosteriorSpec(prior=spec.prior, way=way, X=X, y=y)).weights
    inv_c = 0.0 if spec.C is None else 1.0 / spec.C
    W, _ = _fit_penalized_softmax(X, y, way, inv_c)
    return W
