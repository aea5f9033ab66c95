import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from wpk import FeatureTable, load_container, save_container


def run_cli(*args, env=None, cwd=None):
    import os

    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "wpk.cli", *map(str, args)],
        capture_output=True,
        text=True,
        env=full_env,
        cwd=cwd,
    )


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


SYNTH_ARGS = [
    "synth", "--p", 6, "--n-base", 8, "--n-novel", 6,
    "--per-class", 20, "--seed", 3,
]


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """synth -> train, shared by the read-only CLI tests."""
    d = tmp_path_factory.mktemp("pipeline")
    res = run_cli(*SYNTH_ARGS, "--out-dir", d)
    assert res.returncode == 0, res.stderr
    res = run_cli(
        "train", "--features", d / "base.wpk", "--out", d / "w.wpk",
        "--log", d / "train_log.json",
    )
    assert res.returncode == 0, res.stderr
    return d


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        res = run_cli(*SYNTH_ARGS, "--out-dir", d)
        assert res.returncode == 0, res.stderr
    for name in ("base.wpk", "novel.wpk", "true_weights.wpk"):
        assert _digest(a / name) == _digest(b / name)


def test_train_output_and_log(pipeline):
    objs = load_container(pipeline / "w.wpk")
    assert objs["weights"].rows.shape == (8, 6)
    log = json.loads((pipeline / "train_log.json").read_text())
    assert {"iteration", "loss", "grad_norm"} <= set(log[0])


def test_fit_prior_and_kshot_map(pipeline, tmp_path):
    res = run_cli(
        "fit-prior", "--weights", pipeline / "w.wpk",
        "--model", "gauss_iso", "--out", tmp_path / "prior.wpk",
    )
    assert res.returncode == 0, res.stderr

    novel = load_container(pipeline / "novel.wpk")["novel"]
    ids = novel.class_ids[:3]
    sup_idx = np.concatenate([np.flatnonzero(novel.labels == c)[:2] for c in ids])
    qry_idx = np.concatenate([np.flatnonzero(novel.labels == c)[2:5] for c in ids])
    save_container(tmp_path / "sup.wpk", {"s": novel.take(sup_idx)})
    save_container(tmp_path / "qry.wpk", {"q": novel.take(qry_idx)})

    res = run_cli(
        "kshot", "--prior", tmp_path / "prior.wpk",
        "--support", tmp_path / "sup.wpk", "--query", tmp_path / "qry.wpk",
        "--out", tmp_path / "pred.json", "--weights-out", tmp_path / "learned.wpk",
    )
    assert res.returncode == 0, res.stderr
    payload = json.loads((tmp_path / "pred.json").read_text())
    assert payload["way"] == 3
    assert payload["converged"]
    probs = np.asarray(payload["probabilities"])
    assert probs.shape == (9, 3)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert set(payload["predicted_class_ids"]) <= set(map(int, ids))
    learned = load_container(tmp_path / "learned.wpk")["draw_0"]
    assert learned.rows.shape == (3, 6)


def test_bench_oracle_and_determinism(pipeline, tmp_path):
    args = [
        "bench", "--novel", pipeline / "novel.wpk",
        "--weights", pipeline / "w.wpk",
        "--methods", "oracle,gauss_iso,nn",
        "--n-tasks", 6, "--way", 3, "--shots", "1", "--n-query", 4,
        "--seed", 1,
    ]
    res = run_cli(*args, "--out", tmp_path / "r1.json", "--csv", tmp_path / "r1.csv")
    assert res.returncode == 0, res.stderr
    res = run_cli(*args, "--out", tmp_path / "r2.json")
    assert res.returncode == 0, res.stderr
    assert _digest(tmp_path / "r1.json") == _digest(tmp_path / "r2.json")

    payload = json.loads((tmp_path / "r1.json").read_text())
    assert payload["protocol"]["n_tasks"] == 6
    oracle = payload["methods"]["oracle"]["1"]
    assert oracle["accuracy"] == 1.0
    assert oracle["n_failed"] == 0
    for method in ("gauss_iso", "nn"):
        rep = payload["methods"][method]["1"]
        assert {"accuracy", "accuracy_sem", "mean_nll", "ece", "bins"} <= set(rep)

    header, *rows = (tmp_path / "r1.csv").read_text().splitlines()
    assert header.startswith("method,k,accuracy")
    assert len(rows) == 3


def test_sweep_command(pipeline, tmp_path):
    res = run_cli(
        "sweep", "--novel", pipeline / "novel.wpk", "--weights", pipeline / "w.wpk",
        "--grid", "0.01,1", "--n-tasks", 4, "--way", 3, "--shots", "1",
        "--n-query", 3, "--out", tmp_path / "sweep.json",
    )
    assert res.returncode == 0, res.stderr
    payload = json.loads((tmp_path / "sweep.json").read_text())
    assert set(payload["grid"]) == {"0.01", "1"}
    assert payload["from_weights"]["C"] > 0


def test_online_command(pipeline, tmp_path):
    res = run_cli(
        "online", "--weights", pipeline / "w.wpk",
        "--base-test", pipeline / "base.wpk", "--novel", pipeline / "novel.wpk",
        "--methods", "gauss_iso,logreg_mle",
        "--n-tasks", 4, "--way", 3, "--shots", "1", "--n-query", 3,
        "--n-base-test", 5, "--out", tmp_path / "online.json",
    )
    assert res.returncode == 0, res.stderr
    payload = json.loads((tmp_path / "online.json").read_text())
    for method in ("gauss_iso", "logreg_mle"):
        rep = payload[method]["1"]
        assert {"acc_all", "acc_old", "acc_new", "n_failed"} <= set(rep)


def test_compare_priors_command(pipeline, tmp_path):
    res = run_cli(
        "compare-priors", "--weights", pipeline / "w.wpk",
        "--models", "gauss_iso,laplace_diag",
        "--n-heldout", 2, "--n-splits", 6,
        "--out", tmp_path / "cmp.json", "--csv", tmp_path / "cmp.csv",
    )
    assert res.returncode == 0, res.stderr
    payload = json.loads((tmp_path / "cmp.json").read_text())
    assert set(payload["models"]) == {"gauss_iso", "laplace_diag"}
    assert "mean" in payload["models"]["gauss_iso"]
    assert (tmp_path / "cmp.csv").read_text().startswith("model,")


def test_ingest_with_bias_column(tmp_path):
    csv = tmp_path / "f.csv"
    csv.write_text("label,f0\n0,1.5\n0,2.5\n1,-1.0\n1,-2.0\n")
    res = run_cli(
        "ingest", "--csv", csv, "--out", tmp_path / "t.wpk", "--add-bias-column"
    )
    assert res.returncode == 0, res.stderr
    table = load_container(tmp_path / "t.wpk")["features"]
    assert table.features.shape == (4, 2)
    assert np.all(table.features[:, 1] == 1.0)


def test_missing_input_exits_2(tmp_path):
    res = run_cli("train", "--features", tmp_path / "nope.wpk", "--out", tmp_path / "w.wpk")
    assert res.returncode == 2


def test_corrupt_container_exits_4(tmp_path):
    bad = tmp_path / "bad.wpk"
    bad.write_bytes(b"NOPE1234")
    res = run_cli("train", "--features", bad, "--out", tmp_path / "w.wpk")
    assert res.returncode == 4
    assert "i/o error" in res.stderr


def test_numeric_failure_exits_3(pipeline, tmp_path):
    # constant weights: zero variance, prior fit must fail numerically
    save_container(
        tmp_path / "const.wpk",
        {"weights": load_container(pipeline / "w.wpk")["weights"]},
    )
    from wpk import WeightMatrix

    save_container(
        tmp_path / "const.wpk", {"w": WeightMatrix(np.ones((4, 3)), np.arange(4))}
    )
    res = run_cli(
        "fit-prior", "--weights", tmp_path / "const.wpk",
        "--model", "gauss_iso", "--out", tmp_path / "p.wpk",
    )
    assert res.returncode == 3
    assert "numeric error" in res.stderr


def test_config_unknown_key_exits_2(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("bogus_key: 1\n")
    res = run_cli(*SYNTH_ARGS, "--out-dir", tmp_path, "--config", cfg)
    assert res.returncode == 2
    assert "unknown config keys" in res.stderr


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("seed: 3\nn_base: 4\n")
    a, b = tmp_path / "a", tmp_path / "b"
    # config seed 3 + flag n-base 8 must equal all-flags run
    res = run_cli(
        "synth", "--p", 6, "--n-novel", 6, "--per-class", 20,
        "--n-base", 8, "--config", cfg, "--out-dir", a,
    )
    assert res.returncode == 0, res.stderr
    res = run_cli(*SYNTH_ARGS, "--out-dir", b)
    assert res.returncode == 0, res.stderr
    assert _digest(a / "base.wpk") == _digest(b / "base.wpk")
    objs = load_container(a / "base.wpk")["base"]
    assert len(np.unique(objs.labels)) == 8  # flag won over config's 4


def test_wpk_out_dir_redirects_relative_paths(pipeline, tmp_path):
    res = run_cli(
        "fit-prior", "--weights", pipeline / "w.wpk",
        "--model", "laplace_iso", "--out", "sub/prior.wpk",
        env={"WPK_OUT_DIR": str(tmp_path)},
    )
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "sub" / "prior.wpk").exists()


def test_unknown_method_spec_exits_2(pipeline, tmp_path):
    res = run_cli(
        "bench", "--novel", pipeline / "novel.wpk", "--methods", "gauss_bogus",
        "--n-tasks", 2, "--way", 3, "--shots", "1", "--n-query", 2,
        "--out", tmp_path / "r.json",
    )
    assert res.returncode == 2
