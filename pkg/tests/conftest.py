import os

import numpy as np
import pytest

from featft import data, zoo
from featft.engine import Model

CACHE_DIR = os.path.join(os.path.dirname(__file__), "_cache")

# the settings the full-scale (acceptance) experiments run at
FULL_SEED = 7
FULL_PER_CLASS = 250
FULL_TRAIN = zoo.TrainConfig()


def train_or_load(spec, dataset, cfg, tag: str) -> zoo.Checkpoint:
    """Train once per (tag, spec); later runs reuse the cached checkpoint."""
    os.makedirs(CACHE_DIR, exist_ok=True)
    path = os.path.join(CACHE_DIR, f"{tag}-{spec.name}.ftw")
    if os.path.exists(path):
        try:
            return zoo.load_checkpoint(path)
        except zoo.FormatError:
            os.remove(path)
    cp = zoo.train(spec, dataset, cfg)
    zoo.save_checkpoint(cp, path)
    return cp


@pytest.fixture(scope="session")
def full_dataset() -> data.Dataset:
    return data.gen_synthetic_dataset(FULL_SEED, FULL_PER_CLASS)


@pytest.fixture(scope="session")
def trained_models(full_dataset) -> dict[str, Model]:
    models = {}
    for spec in zoo.build_zoo():
        cp = train_or_load(spec, full_dataset, FULL_TRAIN, f"full{FULL_SEED}-{FULL_PER_CLASS}")
        models[spec.name] = zoo.load_model(spec, cp)
    return models


@pytest.fixture(scope="session")
def tiny_dataset() -> data.Dataset:
    return data.gen_synthetic_dataset(3, 10)


@pytest.fixture(scope="session")
def tiny_models(tiny_dataset) -> dict[str, Model]:
    """Quickly trained models for unit tests that only need plausible weights."""
    cfg = zoo.TrainConfig(epochs=3, learning_rate=0.05, batch_size=8, seed=1)
    models = {}
    for spec in zoo.build_zoo():
        cp = train_or_load(spec, tiny_dataset, cfg, "tiny")
        models[spec.name] = zoo.load_model(spec, cp)
    return models


@pytest.fixture(scope="session")
def random_model() -> Model:
    spec = zoo.build_zoo()[1]
    return Model(spec, zoo.init_weights(spec, 42))


def jobs() -> int:
    return min(8, os.cpu_count() or 1)
