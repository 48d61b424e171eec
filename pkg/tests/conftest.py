"""Shared fixtures: a small dataset and trained model reused across test files."""

from __future__ import annotations

import numpy as np
import pytest

from prototta.harness import SyntheticTaskSpec, generate_dataset, save_dataset, train_source_model
from prototta.model import BackboneConfig, ModelConfig, PrototypeModel, save_model


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticTaskSpec(samples_per_split=(400, 2048))
    return generate_dataset(spec)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    model, stats = train_source_model(tiny_dataset, epochs=3, seed=0)
    assert stats["clean_accuracy"] > 0.9
    return model


@pytest.fixture(scope="session")
def saved_files(tmp_path_factory, tiny_model, tiny_dataset):
    root = tmp_path_factory.mktemp("artifacts")
    model_path = root / "model.json"
    data_path = root / "data.npz"
    save_model(tiny_model, model_path)
    save_dataset(tiny_dataset, data_path)
    return {"model": model_path, "dataset": data_path, "root": root}


@pytest.fixture()
def small_model():
    """An untrained model small enough for finite-difference sweeps."""
    config = ModelConfig(
        backbone=BackboneConfig(input_dim=8, hidden_dims=(16,), has_onexone=True),
        num_classes=3,
        protos_per_class=2,
        sub_prototypes=2,
    )
    return PrototypeModel(config, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
