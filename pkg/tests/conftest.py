from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pytest

from quadfault.config import ExperimentConfig, Method, TrainConfig
from quadfault.dataio import SyntheticSpec, synthetic_dataset
from quadfault.losses import QuadrupletLossConfig
from quadfault.pairing import WindowedDataset, apply_imbalance


TESTS_DIR = Path(__file__).parent


@pytest.fixture
def small_dataset() -> WindowedDataset:
    """Three classes, 20 short two-channel sequences each."""
    spec = SyntheticSpec(class_count=3, samples_per_class=20, length=6, channels=2)
    return synthetic_dataset(spec)


@pytest.fixture
def imbalanced_dataset(small_dataset: WindowedDataset) -> WindowedDataset:
    """`small_dataset` with class 2 thinned out to 4 windows."""
    return apply_imbalance(small_dataset, {2: 4}, np.random.default_rng(0))


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        method=Method.QDM,
        epochs=2,
        batch_size=8,
        learning_rate=1e-2,
        seed=3,
        loss=QuadrupletLossConfig(
            margin=1.0, margin2=2.0, lambda_pos=2.0, lambda_minor=2.0, beta=1e-2
        ),
        dropout=0.2,
        hidden_size=5,
        layer_count=2,
        embed_dim=3,
        class_count=3,
        steps_per_epoch=3,
        log_every=0,
    )


@pytest.fixture
def experiment_data() -> dict[str, Any]:
    """A two-method, two-repeat scenario small enough to train in seconds."""
    return {
        "name": "tiny",
        "dataset": {
            "kind": "synthetic",
            "test_fraction": 0.25,
            "synthetic": {
                "class_count": 3,
                "samples_per_class": 20,
                "length": 6,
                "channels": 2,
            },
        },
        "scenario": {"name": "tiny 5:1", "imbalanced_classes": ["class_2"], "ratio": 5},
        "methods": ["qdm", "plain"],
        "repeats": 2,
        "seed_base": 7,
        "train": {
            "epochs": 1,
            "batch_size": 8,
            "learning_rate": 0.01,
            "dropout": 0.0,
            "hidden_size": 5,
            "layer_count": 1,
            "embed_dim": 3,
            "class_count": 3,
            "steps_per_epoch": 2,
            "log_every": 0,
            "loss": {"margin": 1, "margin2": 2, "lambda_pos": 2, "lambda_minor": 2},
        },
        "ablation": {"presets": ["A", "D"], "betas": [0.0, 0.01]},
    }


@pytest.fixture
def experiment(experiment_data: dict[str, Any]) -> ExperimentConfig:
    return ExperimentConfig.from_dict(experiment_data)
