"""Command-line pipeline: ingest -> train -> fit-prior -> kshot -> bench /
sweep / online / compare-priors.

Every command accepts ``--config FILE`` (YAML; keys are the long option names
with underscores) whose values fill in options not given on the command line;
explicit flags win.  Unknown config keys are rejected.  All randomness flows
from the per-command seed through documented Philox substreams, so reruns
with the same config produce byte-identical outputs (no timestamps are
written).  ``WPK_OUT_DIR`` redirects relative output paths.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 I/O or
container-format failure.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml
from click.core import ParameterSource

from . import container
from .container import ContainerError, load_container, load_csv, save_container
from .data import FeatureTable, WeightMatrix
from .evaluate import OnlineMethodSpec, Protocol, online_eval, reg_sweep, run_benchmark
from .exceptions import ConfigError, NumericError, WpkError
from .inference import (
    CosineNearestNeighbor,
    HmcConfig,
    LogisticBaseline,
    Predictor,
    PriorSoftmaxClassifier,
    hmc_kshot,
    map_kshot,
    predict,
)
from .inference import PosteriorSpec
from .priors import (
    default_niw_prior,
    fit_gaussian,
    fit_gmm,
    fit_laplace,
    heldout_logprob,
    niw_map,
    niw_posterior,
    student_t_predictive,
)
from .representational import (
    SyntheticWorldConfig,
    TrainConfig,
    generate_synthetic_world,
    train_linear_softmax,
)
from .serialize import load_prior, save_prior


def out_path(p) -> Path:
    p = Path(p)
    base = os.environ.get("WPK_OUT_DIR")
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _dump_json(path, payload) -> None:
    path = out_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def with_config(f):
    """Fill option defaults from a YAML config file; explicit flags win."""

    @click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="YAML config supplying option values.",
    )
    @functools.wraps(f)
    def wrapper(*args, config_path=None, **kwargs):
        if config_path:
            cfg = yaml.safe_load(Path(config_path).read_text()) or {}
            if not isinstance(cfg, dict):
                raise ConfigError(f"{config_path}: config must be a mapping")
            unknown = sorted(set(cfg) - set(kwargs))
            if unknown:
                raise ConfigError(f"{config_path}: unknown config keys {unknown}")
            ctx = click.get_current_context()
            for key, val in cfg.items():
                if ctx.get_parameter_source(key) == ParameterSource.DEFAULT:
                    kwargs[key] = val
        return f(*args, **kwargs)

    return wrapper


def _load_table(path, name, want):
    objs = load_container(path)
    if name is None:
        matches = [v for v in objs.values() if isinstance(v, want)]
        if len(matches) != 1:
            raise ConfigError(
                f"{path}: expected exactly one {want.__name__}, found {len(matches)}; "
                "use --table to pick one"
            )
        return matches[0]
    if name not in objs or not isinstance(objs[name], want):
        raise ConfigError(f"{path}: no {want.__name__} named {name!r}")
    return objs[name]


# ---------------------------------------------------------------------------
# Method spec parsing


def parse_prior_spec(spec: str, wtilde: WeightMatrix | None, seed: int = 0):
    """Fit a prior per a spec string: gauss_{iso|diag|full}, niw_map, student,
    gmm_<S>_{iso|diag|full}, laplace_{diag|iso}."""
    if wtilde is None:
        raise ConfigError(f"prior spec {spec!r} needs trained base weights (--weights)")
    cov_names = {"iso": "isotropic", "diag": "diagonal", "full": "full"}
    parts = spec.split("_")
    if parts[0] == "gauss" and len(parts) == 2 and parts[1] in cov_names:
        return fit_gaussian(wtilde, cov_names[parts[1]])
    if spec == "niw_map":
        return niw_map(niw_posterior(default_niw_prior(wtilde), wtilde))
    if spec == "student":
        return student_t_predictive(niw_posterior(default_niw_prior(wtilde), wtilde))
    if parts[0] == "gmm" and len(parts) == 3 and parts[2] in cov_names:
        return fit_gmm(wtilde, int(parts[1]), cov_names[parts[2]], seed=seed)
    if parts[0] == "laplace" and len(parts) == 2 and parts[1] in ("diag", "iso"):
        return fit_laplace(wtilde, "diagonal" if parts[1] == "diag" else "isotropic")
    raise ConfigError(f"unknown prior spec {spec!r}")


class _OracleLookup:
    """Test-harness method: memorizes the full novel table and answers with a
    one-hot on the true label of each query row (rows matched exactly)."""

    def __init__(self, table: FeatureTable):
        self._index = {row.tobytes(): int(lab) for row, lab in zip(table.features, table.labels)}
        self._classes = table.class_ids

    def fit(self, X, y):
        self.classes_ = np.unique(y)
        return self

    def predict_proba(self, X):
        probs = np.zeros((len(X), len(self.classes_)))
        lut = {int(c): i for i, c in enumerate(self.classes_)}
        for i, row in enumerate(np.asarray(X, dtype=np.float64)):
            probs[i, lut[self._index[row.tobytes()]]] = 1.0
        return probs


def parse_method_spec(spec: str, wtilde, novel, seed: int, hmc_cfg=None):
    """Benchmark method factory for a spec string.

    Prior specs as in parse_prior_spec, optionally prefixed ``hmc_``;
    baselines: logreg_mle, logreg_cv, logreg_c2var, logreg_fixed_<C>, nn;
    oracle (true-label lookup, testing only).
    """
    if spec == "nn":
        return CosineNearestNeighbor
    if spec == "oracle":
        oracle = _OracleLookup(novel)
        return lambda: oracle
    if spec == "logreg_mle":
        return lambda: LogisticBaseline(reg="mle")
    if spec == "logreg_cv":
        return lambda: LogisticBaseline(reg="cv")
    if spec == "logreg_c2var":
        if wtilde is None:
            raise ConfigError("logreg_c2var needs trained base weights (--weights)")
        return lambda: LogisticBaseline(reg="from_weights", wtilde=wtilde)
    if spec.startswith("logreg_fixed_"):
        c = float(spec.removeprefix("logreg_fixed_"))
        return lambda: LogisticBaseline(reg="fixed", C=c)
    inference = "map"
    prior_spec = spec
    if spec.startswith("hmc_"):
        inference = "hmc"
        prior_spec = spec.removeprefix("hmc_")
    prior = parse_prior_spec(prior_spec, wtilde, seed=seed)
    cfg = hmc_cfg or HmcConfig(n_samples=200, n_warmup=200, seed=seed)
    return lambda: PriorSoftmaxClassifier(prior, inference=inference, hmc=cfg)


# ---------------------------------------------------------------------------
# Commands


@click.group()
def cli():
    """Probabilistic k-shot learning toolkit."""


@cli.command()
@click.option("--csv", "csv_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--name", default="features", show_default=True)
@click.option("--out", "out_file", required=True)
@click.option("--add-bias-column", is_flag=True, help="Append a constant-1 feature column.")
@with_config
def ingest(csv_path, name, out_file, add_bias_column):
    """Import a CSV fixture (header label,f0,f1,...) into a container."""
    table = load_csv(csv_path)
    if add_bias_column:
        table = FeatureTable(
            np.hstack([table.features, np.ones((table.n, 1))]), table.labels
        )
    save_container(out_path(out_file), {name: table})
    click.echo(f"wrote {table.n} rows x {table.dim} features")


@cli.command()
@click.option("--p", type=int, default=16, show_default=True)
@click.option("--n-base", type=int, default=40, show_default=True)
@click.option("--n-novel", type=int, default=20, show_default=True)
@click.option("--per-class", type=int, default=50, show_default=True)
@click.option("--weight-mean", type=float, default=0.0, show_default=True)
@click.option("--weight-var", type=float, default=1.0, show_default=True)
@click.option("--noise-var", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", "out_dir", default=".", show_default=True)
@with_config
def synth(p, n_base, n_novel, per_class, weight_mean, weight_var, noise_var, seed, out_dir):
    """Generate a synthetic world with known generative parameters."""
    cfg = SyntheticWorldConfig(
        p=p,
        n_base=n_base,
        n_novel=n_novel,
        per_class=per_class,
        weight_mean=weight_mean,
        weight_var=weight_var,
        noise_var=noise_var,
        seed=seed,
    )
    base, novel, true_w = generate_synthetic_world(cfg)
    out = out_path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_container(out / "base.wpk", {"base": base})
    save_container(out / "novel.wpk", {"novel": novel})
    save_container(out / "true_weights.wpk", {"true_weights": true_w})
    click.echo(f"wrote base/novel/true_weights containers to {out}")


@cli.command()
@click.option("--features", "features_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--table", default=None, help="Table name inside the container.")
@click.option("--out", "out_file", required=True)
@click.option("--log", "log_file", default=None, help="JSON training log path.")
@click.option("--l2", type=float, default=1e-5, show_default=True)
@click.option("--max-iters", type=int, default=500, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@with_config
def train(features_path, table, out_file, log_file, l2, max_iters, tol, seed):
    """Train the base-class softmax head over fixed features."""
    base = _load_table(features_path, table, FeatureTable)
    result = train_linear_softmax(
        base, TrainConfig(l2_strength=l2, max_iters=max_iters, grad_tolerance=tol, seed=seed)
    )
    save_container(out_path(out_file), {"weights": result.weights})
    if log_file:
        out_path(log_file).write_text(result.history_json() + "\n")
    click.echo(
        f"trained {result.weights.n_classes} classes: loss {result.final_loss:.6f}, "
        f"grad {result.final_grad_norm:.2e}, "
        f"{'converged' if result.converged else 'max_iters hit'}"
    )


@cli.command("fit-prior")
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--table", default=None)
@click.option("--model", default="gauss_iso", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_file", required=True)
@with_config
def fit_prior(weights_path, table, model, seed, out_file):
    """Fit a weight prior to trained base-class weights."""
    wtilde = _load_table(weights_path, table, WeightMatrix)
    prior = parse_prior_spec(model, wtilde, seed=seed)
    save_prior(out_path(out_file), prior)
    click.echo(f"fit {model} prior on {wtilde.n_classes} weight rows")


@cli.command()
@click.option("--prior", "prior_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--support", "support_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--support-table", default=None)
@click.option("--query", "query_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--query-table", default=None)
@click.option("--inference", type=click.Choice(["map", "hmc"]), default="map", show_default=True)
@click.option("--n-samples", type=int, default=500, show_default=True)
@click.option("--n-warmup", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_file", required=True)
@click.option("--weights-out", default=None, help="Container for the learned weights/draws.")
@with_config
def kshot(
    prior_path,
    support_path,
    support_table,
    query_path,
    query_table,
    inference,
    n_samples,
    n_warmup,
    seed,
    out_file,
    weights_out,
):
    """Learn new-class weights from a support set and score a query set."""
    prior = load_prior(prior_path)
    support = _load_table(support_path, support_table, FeatureTable)
    spec = PosteriorSpec.from_support(prior, support)
    payload = {"way": spec.way, "class_ids": [int(c) for c in support.class_ids]}
    if inference == "map":
        result = map_kshot(spec)
        predictor = Predictor(point=result.weights)
        payload["converged"] = result.converged
        payload["grad_norm"] = result.grad_norm
        draws = result.weights[None]
    else:
        result = hmc_kshot(
            spec, HmcConfig(n_samples=n_samples, n_warmup=n_warmup, seed=seed)
        )
        predictor = result.predictor
        payload["accept_rate"] = result.accept_rate
        payload["step_size"] = result.step_size
        draws = result.predictor.samples
    if query_path:
        query = _load_table(query_path, query_table, FeatureTable)
        probs = predict(predictor, query)
        classes = support.class_ids
        payload["predicted_class_ids"] = [
            int(classes[i]) for i in probs.argmax(axis=1)
        ]
        payload["probabilities"] = probs.tolist()
    _dump_json(out_file, payload)
    if weights_out:
        save_container(
            out_path(weights_out),
            {f"draw_{i}": WeightMatrix(W, support.class_ids) for i, W in enumerate(draws)},
        )
    click.echo(f"kshot ({inference}) done: way={spec.way}")


def _protocol_options(f):
    for opt in reversed(
        [
            click.option("--n-tasks", type=int, default=600, show_default=True),
            click.option("--way", type=int, default=5, show_default=True),
            click.option("--shots", default="1,5", show_default=True, help="Comma-separated k values."),
            click.option("--n-query", type=int, default=15, show_default=True),
            click.option("--seed", type=int, default=0, show_default=True),
            click.option("--workers", type=int, default=1, show_default=True),
        ]
    ):
        f = opt(f)
    return f


def _build_protocol(n_tasks, way, shots, n_query, seed) -> Protocol:
    shot_list = tuple(int(s) for s in str(shots).split(","))
    return Protocol(n_tasks=n_tasks, way=way, shots=shot_list, n_query=n_query, base_seed=seed)


def _reports_payload(reports: dict) -> dict:
    return {
        name: {str(k): rep.to_dict() for k, rep in per_k.items()}
        for name, per_k in reports.items()
    }


def _write_report_csv(path, reports: dict) -> None:
    lines = ["method,k,accuracy,accuracy_sem,mean_nll,nll_sem,ece,n_points,n_failed"]
    for name in sorted(reports):
        for k in sorted(reports[name]):
            r = reports[name][k]
            lines.append(
                f"{name},{k},{r.accuracy:.6f},{r.accuracy_sem:.6f},{r.mean_nll:.6f},"
                f"{r.nll_sem:.6f},{r.ece:.6f},{r.n_points},{r.n_failed}"
            )
    out_path(path).write_text("\n".join(lines) + "\n")


@cli.command()
@click.option("--novel", "novel_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--table", default=None)
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--methods", default="gauss_iso,logreg_mle,nn", show_default=True)
@_protocol_options
@click.option("--out", "out_file", required=True)
@click.option("--csv", "csv_file", default=None)
@click.option("--plot", "plot_file", default=None, help="Calibration-curve SVG.")
@with_config
def bench(
    novel_path,
    table,
    weights_path,
    methods,
    n_tasks,
    way,
    shots,
    n_query,
    seed,
    workers,
    out_file,
    csv_file,
    plot_file,
):
    """Run the episodic benchmark for a set of methods."""
    novel = _load_table(novel_path, table, FeatureTable)
    wtilde = (
        _load_table(weights_path, None, WeightMatrix) if weights_path else None
    )
    protocol = _build_protocol(n_tasks, way, shots, n_query, seed)
    specs = [m.strip() for m in methods.split(",") if m.strip()]
    factories = {m: parse_method_spec(m, wtilde, novel, seed) for m in specs}
    reports = run_benchmark(novel, factories, protocol, workers=workers)
    _dump_json(
        out_file,
        {
            "protocol": {
                "n_tasks": protocol.n_tasks,
                "way": protocol.way,
                "shots": list(protocol.shots),
                "n_query": protocol.n_query,
                "base_seed": protocol.base_seed,
            },
            "methods": _reports_payload(reports),
        },
    )
    if csv_file:
        _write_report_csv(csv_file, reports)
    if plot_file:
        from .plots import calibration_plot

        calibration_plot(reports, protocol.shots[-1], out_path(plot_file))
    for name in specs:
        for k in protocol.shots:
            r = reports[name][k]
            click.echo(
                f"{name} k={k}: acc {r.accuracy:.3f}±{r.accuracy_sem:.3f} "
                f"nll {r.mean_nll:.3f} ece {r.ece:.3f}"
            )


@cli.command()
@click.option("--novel", "novel_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--table", default=None)
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--grid", default="1e-5,1e-4,1e-3,1e-2,1e-1,1,10", show_default=True)
@_protocol_options
@click.option("--out", "out_file", required=True)
@click.option("--csv", "csv_file", default=None)
@click.option("--plot", "plot_file", default=None)
@with_config
def sweep(
    novel_path,
    table,
    weights_path,
    grid,
    n_tasks,
    way,
    shots,
    n_query,
    seed,
    workers,
    out_file,
    csv_file,
    plot_file,
):
    """Regularization-constant sweep for logistic regression."""
    novel = _load_table(novel_path, table, FeatureTable)
    wtilde = _load_table(weights_path, None, WeightMatrix)
    protocol = _build_protocol(n_tasks, way, shots, n_query, seed)
    grid_vals = [float(c) for c in grid.split(",")]
    result = reg_sweep(novel, wtilde, protocol, grid_vals, workers=workers)
    payload = {
        "grid": {
            f"{c:g}": {str(k): rep.to_dict() for k, rep in per_k.items()}
            for c, per_k in result["grid"].items()
        },
        "from_weights": {
            "C": result["from_weights"]["C"],
            "reports": {
                str(k): rep.to_dict()
                for k, rep in result["from_weights"]["reports"].items()
            },
        },
    }
    _dump_json(out_file, payload)
    if csv_file:
        flat = {f"C={c:g}": per_k for c, per_k in result["grid"].items()}
        flat["from_weights"] = result["from_weights"]["reports"]
        _write_report_csv(csv_file, flat)
    if plot_file:
        from .plots import sweep_plot

        sweep_plot(result, out_path(plot_file))
    click.echo(f"sweep over {len(grid_vals)} constants done (C_2var={result['from_weights']['C']:.4g})")


@cli.command()
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--base-test", "base_test_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--base-test-table", default=None)
@click.option("--novel", "novel_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--table", default=None)
@click.option("--methods", default="gauss_iso,logreg_mle,logreg_c2var_only_new", show_default=True)
@click.option("--n-base-test", type=int, default=100, show_default=True)
@_protocol_options
@click.option("--out", "out_file", required=True)
@with_config
def online(
    weights_path,
    base_test_path,
    base_test_table,
    novel_path,
    table,
    methods,
    n_base_test,
    n_tasks,
    way,
    shots,
    n_query,
    seed,
    workers,
    out_file,
):
    """Joint old+new softmax evaluation (catastrophic-forgetting probe)."""
    wtilde = _load_table(weights_path, None, WeightMatrix)
    base_test = _load_table(base_test_path, base_test_table, FeatureTable)
    novel = _load_table(novel_path, table, FeatureTable)
    protocol = _build_protocol(n_tasks, way, shots, n_query, seed)
    payload = {}
    for spec_name in [m.strip() for m in methods.split(",") if m.strip()]:
        mode = "joint"
        base_spec = spec_name
        if spec_name.endswith("_only_new"):
            mode = "only_new"
            base_spec = spec_name.removesuffix("_only_new")
        if base_spec == "logreg_mle":
            method = OnlineMethodSpec(mode=mode)
        elif base_spec == "logreg_c2var":
            from .inference import reg_from_weights

            method = OnlineMethodSpec(C=reg_from_weights(wtilde), mode=mode)
        elif base_spec.startswith("logreg_fixed_"):
            method = OnlineMethodSpec(C=float(base_spec.removeprefix("logreg_fixed_")), mode=mode)
        else:
            method = OnlineMethodSpec(prior=parse_prior_spec(base_spec, wtilde, seed=seed), mode=mode)
        reports = online_eval(
            wtilde, method, base_test, novel, protocol, n_base_test_per_class=n_base_test
        )
        payload[spec_name] = {str(k): rep.to_dict() for k, rep in reports.items()}
        for k, rep in reports.items():
            click.echo(
                f"{spec_name} k={k}: all {rep.acc_all:.3f} old {rep.acc_old:.3f} "
                f"new {rep.acc_new:.3f}"
            )
    _dump_json(out_file, payload)


@cli.command("compare-priors")
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option(
    "--models",
    default="gauss_iso,gauss_diag,gauss_full,gmm_3_iso,laplace_diag,laplace_iso",
    show_default=True,
)
@click.option("--n-heldout", type=int, default=10, show_default=True)
@click.option("--n-splits", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_file", required=True)
@click.option("--csv", "csv_file", default=None)
@with_config
def compare_priors(weights_path, models, n_heldout, n_splits, seed, out_file, csv_file):
    """Held-out weight log-probability comparison across prior models."""
    wtilde = _load_table(weights_path, None, WeightMatrix)
    rows = {}
    for spec_name in [m.strip() for m in models.split(",") if m.strip()]:
        fitter = _heldout_fitter(spec_name, seed)
        res = heldout_logprob(wtilde, fitter, n_heldout, n_splits, seed=seed)
        rows[spec_name] = {"mean": res.mean, "sem": res.sem, "n_failed": res.n_failed}
        click.echo(f"{spec_name}: heldout logprob {res.mean:.3f} ± {res.sem:.3f}")
    _dump_json(out_file, {"n_heldout": n_heldout, "n_splits": n_splits, "models": rows})
    if csv_file:
        lines = ["model,mean_heldout_logprob,sem,n_failed"]
        for name in sorted(rows):
            r = rows[name]
            lines.append(f"{name},{r['mean']:.6f},{r['sem']:.6f},{r['n_failed']}")
        out_path(csv_file).write_text("\n".join(lines) + "\n")


def _heldout_fitter(spec: str, seed: int):
    """Fit function for held-out comparison; same spec names as fit-prior."""

    def fit(train_rows):
        return parse_prior_spec(spec, WeightMatrix(train_rows, np.arange(len(train_rows))), seed=seed)

    return fit


def main():
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except (ContainerError, OSError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(4)
    except (NumericError, ValueError, np.linalg.LinAlgError, WpkError) as exc:
        click.echo(f"numeric error: {exc}", err=True)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    main()
