"""Shared fixtures: tiny model profiles and datasets sized for fast tests."""

import numpy as np
import pytest

from amp.data import synth_dataset
from amp.model import ModelConfig, init_random


@pytest.fixture
def tiny_config():
    """Smallest config that still exercises every code path."""
    return ModelConfig(image_size=8, patch_size=4, embed_dim=8,
                       num_blocks=2, num_heads=2, mlp_hidden=16)


@pytest.fixture
def tiny_model(tiny_config):
    return init_random(tiny_config, seed=0)


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(3)
    return rng.uniform(0.0, 1.0, size=(4, 8, 8, 3))


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(num_classes=4, per_class=20, image_size=8, seed=5)


@pytest.fixture(scope="session")
def trained_small():
    """A briefly trained small model plus its dataset and head.

    Session-scoped because several modules want importance scores from a
    model whose gradients are not pure initialization noise.
    """
    from amp.distill import DistillConfig, train_supervised
    from amp.data import split_dataset

    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=16,
                      num_blocks=2, num_heads=2, mlp_hidden=32)
    full = synth_dataset(num_classes=4, per_class=40, image_size=8, seed=5)
    train_set, holdout = split_dataset(full, holdout_per_class=10, seed=5)
    model = init_random(cfg, seed=1)
    tcfg = DistillConfig(epochs=4, warmup_epochs=1, base_lr=4e-3, min_lr=1e-5,
                         batch_size=32, seed=1)
    head, _ = train_supervised(model, 4, train_set, tcfg)
    return {"model": model, "head": head, "train": train_set,
            "holdout": holdout, "config": cfg}
