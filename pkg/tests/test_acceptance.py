"""Directional checks on the synthetic 10:1 scenario.

These train dozens of models and take several minutes; run them with
``pytest -m slow``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from quadfault.config import Method, TrainConfig, default_workers, load_experiment
from quadfault.dataio import Regime, SyntheticSpec, synthetic_dataset
from quadfault.experiments import (
    AblationResult,
    ScenarioResult,
    fit_model,
    model_inputs,
    run_ablation,
    run_scenario,
)
from quadfault.metrics import evaluate


pytestmark = pytest.mark.slow

SCENARIO = Path(__file__).parent.parent / "configs" / "synthetic.yaml"
MINORITY = 3


@pytest.fixture(scope="module")
def comparison() -> ScenarioResult:
    cfg = load_experiment(SCENARIO, ["methods=[qdm, plain]"])
    workers = default_workers()
    return run_scenario(cfg, parallel=workers > 1, max_workers=workers)


@pytest.fixture(scope="module")
def ablation() -> AblationResult:
    cfg = load_experiment(
        SCENARIO, ["ablation.presets=[A, D]", "ablation.betas=[0.1, 0.001]"]
    )
    workers = default_workers()
    return run_ablation(cfg, parallel=workers > 1, max_workers=workers)


def test_qdm_raises_minority_recall(comparison: ScenarioResult) -> None:
    """Test that LSTM-QDM lifts minority recall without hurting the average."""
    qdm = comparison.aggregates["LSTM-QDM"]
    plain = comparison.aggregates["LSTM"]

    assert qdm.count == plain.count == 5
    assert qdm.recall[MINORITY].mean >= plain.recall[MINORITY].mean + 0.05
    assert qdm.macro_recall.mean >= plain.macro_recall.mean - 0.02


def test_weighted_margins_beat_plain_quadruplets(ablation: AblationResult) -> None:
    """Test that preset D matches or beats preset A in at least four of five seeds."""
    a = ablation.points_for("A", 0.001)
    d = ablation.points_for("D", 0.001)

    wins = sum(
        1
        for pa, pd in zip(a, d, strict=True)
        if pd.minority_recall is not None
        and pa.minority_recall is not None
        and pd.minority_recall >= pa.minority_recall
    )
    assert wins >= 4


def test_large_beta_costs_average_recall(ablation: AblationResult) -> None:
    """Test that a metric weight of 0.1 drags macro recall well below 0.001."""
    heavy = [p.macro_recall for p in ablation.points_for("D", 0.1)]
    light = [p.macro_recall for p in ablation.points_for("D", 0.001)]

    assert np.mean(heavy) <= np.mean(light) - 0.10


def test_separable_classes_are_learned() -> None:
    """Test that two clearly distinct regimes are fitted almost perfectly."""
    spec = SyntheticSpec(
        class_count=2,
        samples_per_class=200,
        length=16,
        noise=0.1,
        regimes=(
            Regime(slope=0.0, amplitude=1.0, frequency=0.3),
            Regime(slope=0.2, amplitude=1.0, frequency=0.9),
        ),
    )
    ds = synthetic_dataset(spec)
    cfg = TrainConfig(
        method=Method.PLAIN,
        epochs=1,
        steps_per_epoch=200,
        batch_size=32,
        learning_rate=1e-2,
        dropout=0.0,
        hidden_size=8,
        layer_count=1,
        embed_dim=4,
        class_count=2,
        log_every=0,
    )

    result = fit_model(ds, cfg)
    report = evaluate(result.model, model_inputs(result.model, ds))

    assert report.accuracy >= 0.99
    window = np.ones(50) / 50
    smoothed = np.convolve(result.losses, window, mode="valid")
    assert smoothed[-1] < smoothed[0]
