import numpy as np
import pytest

from wpk import (
    SyntheticWorldConfig,
    TrainConfig,
    generate_synthetic_world,
    train_linear_softmax,
)


@pytest.fixture(scope="session")
def small_world():
    """Cheap world for unit tests: 8-dim features, 10 base / 6 novel classes."""
    cfg = SyntheticWorldConfig(
        p=8, n_base=10, n_novel=6, per_class=30, weight_var=1.0, noise_var=0.5, seed=11
    )
    return generate_synthetic_world(cfg)


@pytest.fixture(scope="session")
def small_wtilde(small_world):
    base, _, _ = small_world
    return train_linear_softmax(base, TrainConfig()).weights


@pytest.fixture(scope="session")
def standard_world():
    """Standard benchmark world: p=16, 40 base / 20 novel classes."""
    cfg = SyntheticWorldConfig(
        p=16, n_base=40, n_novel=20, per_class=50, weight_var=1.0, noise_var=0.5, seed=7
    )
    return generate_synthetic_world(cfg)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
