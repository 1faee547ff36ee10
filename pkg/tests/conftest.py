"""Shared test setup: make the flat app/ modules importable and build tiny runs.

The modules import each other by bare name (``import theory``), so tests put
app/ itself on sys.path instead of importing through a package.
"""
import csv
import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
APP_DIR = REPO_ROOT / "app"

if str(APP_DIR) not in sys.path:
    sys.path.insert(0, str(APP_DIR))

from config import ModelConfig, StageSchedule, TaskSequenceSpec, TrainConfig  # noqa: E402
from datagen import generate  # noqa: E402

TINY_SHAPE = (1, 8, 8)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep a developer's CONFIT_* settings out of the tests."""
    for name in ("CONFIT_PRECISION", "CONFIT_LOG_FILE", "CONFIT_LOG_LEVEL", "CONFIT_RUNS_DB"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(**overrides):
    values = dict(num_tasks=3, classes_per_task=2, train_per_class=8, test_per_class=4,
                  height=8, width=8, cutoff=2, pretext_classes=2, seed=5)
    values.update(overrides)
    return TaskSequenceSpec(**values)


def tiny_config(**overrides):
    schedule = overrides.pop("schedule", StageSchedule(total_epochs=5))
    values = dict(lr=0.05, batch_size=8, seed=3, precision="f64", pretrain_epochs=1,
                  eval_batch_size=16, schedule=schedule, model=ModelConfig(input_shape=TINY_SHAPE))
    values.update(overrides)
    return TrainConfig(**values)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


@pytest.fixture
def sequence():
    return generate(tiny_spec())


@pytest.fixture
def config():
    return tiny_config()
