"""Fixtures: synthetic image folders and local model checkpoints."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from PIL import Image

from wpk_export.backbones import TinyCnn


def _write_class_folder(root, name, base_pattern, n_images, rng):
    d = root / name
    d.mkdir(parents=True)
    for i in range(n_images):
        noisy = np.clip(
            base_pattern + rng.normal(0.0, 25.0, base_pattern.shape), 0, 255
        ).astype(np.uint8)
        Image.fromarray(noisy).save(d / f"img_{i:03d}.png")


@pytest.fixture(scope="session")
def small_images(tmp_path_factory):
    """2 classes x 3 images of 32x32 RGB."""
    root = tmp_path_factory.mktemp("small_images")
    rng = np.random.default_rng(101)
    for j, name in enumerate(["alpha", "beta"]):
        base = rng.integers(0, 256, (32, 32, 3)).astype(float)
        _write_class_folder(root, name, base, 3, rng)
    return root


@pytest.fixture(scope="session")
def untrained_checkpoint(tmp_path_factory):
    """A randomly initialized 5-class TinyCnn, pickled whole."""
    torch.manual_seed(2024)
    model = TinyCnn(n_classes=5)
    path = tmp_path_factory.mktemp("ckpt") / "untrained.pt"
    torch.save(model, path)
    return path


@pytest.fixture(scope="session")
def image_world(tmp_path_factory):
    """20 classes x 30 images with class-distinct base patterns."""
    root = tmp_path_factory.mktemp("image_world")
    rng = np.random.default_rng(7)
    for j in range(20):
        base = rng.integers(0, 256, (32, 32, 3)).astype(float)
        _write_class_folder(root, f"class_{j:02d}", base, 30, rng)
    return root


@pytest.fixture(scope="session")
def trained_checkpoint(image_world, tmp_path_factory):
    """TinyCnn trained on the 20-class image world, pickled whole."""
    from wpk_export.extract import _load_image

    files, labels = [], []
    for j, d in enumerate(sorted(p for p in image_world.iterdir() if p.is_dir())):
        for f in sorted(d.iterdir()):
            files.append(f)
            labels.append(j)
    X = torch.stack([_load_image(f, 32, 0.5, 0.5) for f in files])
    y = torch.tensor(labels)

    torch.manual_seed(42)
    model = TinyCnn(n_classes=20)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss_fn = torch.nn.CrossEntropyLoss()
    perm_gen = torch.Generator().manual_seed(0)
    model.train()
    for _ in range(15):
        order = torch.randperm(len(X), generator=perm_gen)
        for start in range(0, len(X), 64):
            idx = order[start : start + 64]
            opt.zero_grad()
            loss = loss_fn(model(X[idx]), y[idx])
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        train_acc = (model(X).argmax(1) == y).float().mean().item()
    assert train_acc > 0.9, f"backbone failed to train (acc {train_acc:.2f})"

    path = tmp_path_factory.mktemp("ckpt") / "trained.pt"
    torch.save(model, path)
    return path
