"""Session-scoped trained fixtures shared by the slower suites.

Both fixtures use the recipe the acceptance criteria are stated against:
config C, BatchNorm, 80 epochs of alternating training, model seed 1,
passport seed 101, owner ``alice`` and a 100-sample trigger set.
"""
from dataclasses import dataclass

import pytest

from passnorm.data import Dataset, TriggerSet, blobs, make_trigger_set, patterns
from passnorm.models import Model, ModelSpec, build_model, toy_cnn, toy_mlp
from passnorm.passport import PassportBundle, generate_passports
from passnorm.training import History, TrainConfig, train

SEED = 1
PASSPORT_SEED = 101
OWNER = "alice"
EPOCHS = 80


@dataclass
class Trained:
    spec: ModelSpec
    model: Model
    passports: PassportBundle
    train_set: Dataset
    val_set: Dataset
    triggers: TriggerSet
    history: History
    config: TrainConfig


def mlp_data(seed=SEED):
    return blobs(400, seed=seed, spread=0.5), blobs(400, seed=seed, split="val", spread=0.5)


def cnn_data(seed=SEED):
    return patterns(400, seed=seed), patterns(400, seed=seed, split="val")


def train_fixture(spec, data, config="C", seed=SEED, **overrides) -> Trained:
    train_set, val_set = data
    triggers = make_trigger_set(100, spec.input_shape, spec.num_classes, seed=5)
    model = build_model(spec, config, seed=seed)
    passports = generate_passports(spec, OWNER, seed=PASSPORT_SEED)
    cfg = TrainConfig(seed=seed, epochs=overrides.pop("epochs", EPOCHS), **overrides)
    model, history = train(model, train_set, triggers, passports, cfg, eval_every=cfg.epochs)
    return Trained(spec, model, passports, train_set, val_set, triggers, history, cfg)


@pytest.fixture(scope="session")
def mlp_fixture() -> Trained:
    return train_fixture(toy_mlp(), mlp_data())


@pytest.fixture(scope="session")
def cnn_fixture() -> Trained:
    return train_fixture(toy_cnn(), cnn_data())
