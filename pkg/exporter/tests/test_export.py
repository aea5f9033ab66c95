"""Exporter unit tests: extraction contract, CLI behavior, error handling."""

from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from wpk_export.backbones import TinyCnn
from wpk_export.extract import (
    ExportError,
    _load_image,
    export_features,
    extract,
    find_classifier,
    load_model,
)
from wpk_export.writer import write_container


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "wpk_export.cli", *args],
        capture_output=True,
        text=True,
    )


def test_shape_and_label_contract(small_images, untrained_checkpoint):
    model = load_model(str(untrained_checkpoint))
    features, labels, weights, class_ids, label_map, skipped = extract(
        model, small_images
    )
    assert features.shape == (6, 33)  # hidden 32 + folded bias column
    assert labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert weights.shape == (5, 33)
    assert class_ids.tolist() == [0, 1, 2, 3, 4]
    assert label_map == {"alpha": 0, "beta": 1}
    assert skipped == []
    assert features.dtype == np.float64 and weights.dtype == np.float64


def test_bias_folding_reproduces_logits(small_images, untrained_checkpoint):
    model = load_model(str(untrained_checkpoint))
    features, _, weights, _, _, _ = extract(model, small_images)
    assert np.all(features[:, -1] == 1.0)
    files = sorted(
        f for d in sorted(small_images.iterdir()) for f in sorted(d.iterdir())
    )
    batch = torch.stack([_load_image(f, 32, 0.5, 0.5) for f in files])
    model.eval()
    with torch.no_grad():
        logits = model(batch).double().numpy()
    np.testing.assert_allclose(features @ weights.T, logits, atol=1e-6)


def test_extract_batch_independent(small_images, untrained_checkpoint):
    model = load_model(str(untrained_checkpoint))
    f1 = extract(model, small_images, batch=2)[0]
    f2 = extract(model, small_images, batch=6)[0]
    np.testing.assert_allclose(f1, f2, atol=1e-5)


def test_no_linear_layer_rejected():
    with pytest.raises(ExportError, match="no nn.Linear"):
        find_classifier(torch.nn.Conv2d(3, 4, 3))


def test_bad_model_path_rejected(tmp_path):
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(ExportError):
        load_model(str(garbage))
    with pytest.raises(ExportError):
        load_model("no_such_architecture_xyz")


def test_few_undecodable_images_skipped(small_images, untrained_checkpoint, tmp_path):
    root = tmp_path / "imgs"
    for d in small_images.iterdir():
        target = root / d.name
        target.mkdir(parents=True)
        for f in d.iterdir():
            for i in range(4):  # 24 good images so 1 bad stays under 5%
                (target / f"{f.stem}_{i}.png").write_bytes(f.read_bytes())
    (root / "alpha" / "zz_corrupt.png").write_bytes(b"\x89PNG garbage")
    model = load_model(str(untrained_checkpoint))
    features, labels, _, _, _, skipped = extract(model, root)
    assert len(skipped) == 1 and skipped[0].endswith("zz_corrupt.png")
    assert len(features) == len(labels) == 24


def test_too_many_undecodable_images_fail(small_images, untrained_checkpoint, tmp_path):
    root = tmp_path / "imgs"
    for d in small_images.iterdir():
        target = root / d.name
        target.mkdir(parents=True)
        for f in d.iterdir():
            (target / f.name).write_bytes(f.read_bytes())
    (root / "alpha" / "zz_corrupt.png").write_bytes(b"\x89PNG garbage")
    model = load_model(str(untrained_checkpoint))
    with pytest.raises(ExportError, match="undecodable"):
        extract(model, root)


def test_export_twice_byte_identical(small_images, untrained_checkpoint, tmp_path):
    out = tmp_path / "a.wpk"
    export_features(str(untrained_checkpoint), small_images, out)
    first = out.read_bytes()
    export_features(str(untrained_checkpoint), small_images, out)
    assert out.read_bytes() == first


def test_cli_prints_manifest(small_images, untrained_checkpoint, tmp_path):
    out = tmp_path / "export.wpk"
    res = run_cli(
        "export",
        "--model",
        str(untrained_checkpoint),
        "--images",
        str(small_images),
        "--out",
        str(out),
    )
    assert res.returncode == 0, res.stderr
    manifest = json.loads(res.stdout)
    assert manifest["label_map"] == {"alpha": 0, "beta": 1}
    assert manifest["feature_dim"] == 33
    assert manifest["bias_folded"] is True
    assert manifest["n_images"] == 6 and manifest["n_skipped"] == 0
    assert manifest["normalization"] == {"image_size": 32, "mean": 0.5, "std": 0.5}
    assert out.exists()


def test_cli_skip_threshold_exit_nonzero(
    small_images, untrained_checkpoint, tmp_path
):
    root = tmp_path / "imgs"
    for d in small_images.iterdir():
        target = root / d.name
        target.mkdir(parents=True)
        for f in d.iterdir():
            (target / f.name).write_bytes(f.read_bytes())
    (root / "alpha" / "zz_corrupt.png").write_bytes(b"junk")
    out = tmp_path / "export.wpk"
    res = run_cli(
        "export",
        "--model",
        str(untrained_checkpoint),
        "--images",
        str(root),
        "--out",
        str(out),
    )
    assert res.returncode == 1
    assert "undecodable" in res.stderr
    assert not out.exists()  # nothing written on failure


def test_writer_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError, match="non-finite"):
        write_container(tmp_path / "x.wpk", {"a": np.array([[np.inf]])})


def test_writer_atomic_no_temp_left(tmp_path):
    out = tmp_path / "x.wpk"
    write_container(out, {"a": np.eye(2)})
    assert [p.name for p in tmp_path.iterdir()] == ["x.wpk"]
