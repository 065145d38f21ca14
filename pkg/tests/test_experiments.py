"""Tests for scenario and ablation runs."""

from __future__ import annotations

from dataclasses import replace
from typing import TYPE_CHECKING, Any

import pytest

from quadfault.config import BALANCED_REFERENCE, ExperimentConfig
from quadfault.exceptions import ConfigError
from quadfault.experiments import (
    AblationResult,
    ScenarioResult,
    fit_model,
    model_inputs,
    prepare,
    run_ablation,
    run_scenario,
)


if TYPE_CHECKING:
    from quadfault.config import TrainConfig
    from quadfault.pairing import WindowedDataset


def test_prepare_thins_training_only(experiment: ExperimentConfig) -> None:
    """Test that only the training split of the listed class is subsampled."""
    prepared = prepare(experiment)

    assert prepared.test_counts == {0: 5, 1: 5, 2: 5}
    assert prepared.splits.train.class_counts() == {0: 15, 1: 15, 2: 15}
    assert len(prepared.imbalanced) == 2
    for ds in prepared.imbalanced:
        assert ds.class_counts() == {0: 15, 1: 15, 2: 3}
        assert ds.imbalance_set == frozenset({2})
    assert prepared.imbalanced_classes == (2,)
    assert set(prepared.fingerprints) == {
        "train",
        "test",
        "train.repeat.0",
        "train.repeat.1",
    }


def test_run_scenario(experiment: ExperimentConfig) -> None:
    """Test that every method is trained per repeat and scored on the full test set."""
    result = run_scenario(experiment)

    assert result.columns == ["LSTM-QDM", "LSTM"]
    assert result.seeds == [7, 8]
    assert not result.failures
    assert len(result.cells) == 4
    for column in result.columns:
        assert result.aggregates[column].count == 2
    for cell in result.cells:
        meta = cell["report"]["metadata"]
        assert meta["train_counts"] == {"0": 15, "1": 15, "2": 3}
        assert sum(cell["report"]["confusion"][0]) == 5
    assert result.class_names[2] == "class_2"


def test_methods_share_the_subset_of_a_repeat(experiment: ExperimentConfig) -> None:
    """Test that all methods of one repeat train on the same imbalanced subset."""
    result = run_scenario(experiment)

    by_repeat: dict[int, set[str]] = {}
    for cell in result.cells:
        meta = cell["report"]["metadata"]
        by_repeat.setdefault(cell["repeat"], set()).add(meta["train_fingerprint"])

    assert all(len(prints) == 1 for prints in by_repeat.values())


def test_balanced_reference(experiment: ExperimentConfig) -> None:
    """Test that the reference column trains on the full training split."""
    cfg = replace(experiment, repeats=1, include_balanced_reference=True)

    result = run_scenario(cfg)

    assert result.columns[-1] == BALANCED_REFERENCE
    (reference,) = [c for c in result.cells if c["method"] == BALANCED_REFERENCE]
    assert reference["report"]["metadata"]["train_counts"] == {"0": 15, "1": 15, "2": 15}


def test_failed_cells_are_recorded(experiment_data: dict[str, Any]) -> None:
    """Test that a failing method is reported while the others still run."""
    experiment_data["method_overrides"] = {"plain": {"class_count": 2}}
    result = run_scenario(ExperimentConfig.from_dict(experiment_data))

    assert len(result.failures) == 2
    assert all(f["error"].startswith("ConfigError") for f in result.failures)
    assert "LSTM" not in result.aggregates
    assert result.aggregates["LSTM-QDM"].count == 2


def test_parallel_scenario_matches_sequential(experiment: ExperimentConfig) -> None:
    """Test that running cells on worker threads gives the same reports."""
    cfg = replace(experiment, methods=experiment.methods[:1])
    sequential = run_scenario(cfg)
    parallel = run_scenario(cfg, parallel=True, max_workers=2)

    assert [c["report"] for c in parallel.cells] == [
        c["report"] for c in sequential.cells
    ]


def test_scenario_result_round_trip(experiment: ExperimentConfig) -> None:
    """Test that a scenario rebuilds its aggregates from the stored cells."""
    result = run_scenario(replace(experiment, repeats=1))
    again = ScenarioResult.from_dict(result.to_dict())

    assert again.columns == result.columns
    for column in result.columns:
        assert again.aggregates[column].macro_recall == (
            result.aggregates[column].macro_recall
        )


def test_ablation_grid(experiment: ExperimentConfig) -> None:
    """Test that every preset and beta is trained once per repeat."""
    result = run_ablation(experiment)

    assert result.settings == [("A", 0.0), ("A", 0.01), ("D", 0.0), ("D", 0.01)]
    assert len(result.points) == 8
    assert all(p.success for p in result.points)
    summary = result.summary()
    assert [row["runs"] for row in summary] == [2, 2, 2, 2]
    assert all(0.0 <= row["minority_recall"] <= 1.0 for row in summary)
    assert AblationResult.from_dict(result.to_dict()).points == result.points


def test_zero_beta_ablation_matches_plain(experiment: ExperimentConfig) -> None:
    """Test that LSTM-QDM at beta 0 scores exactly like the plain LSTM cells."""
    cfg = replace(
        experiment, ablation=replace(experiment.ablation, presets=("D",), betas=(0.0,))
    )
    ablation = run_ablation(cfg)
    scenario = run_scenario(replace(cfg, methods=cfg.methods[1:]))

    plain = [c["report"]["per_class"]["2"]["recall"] for c in scenario.cells]
    assert [p.minority_recall for p in ablation.points] == plain


def test_ablation_needs_imbalanced_class(experiment_data: dict[str, Any]) -> None:
    """Test that an ablation without a thinned class is refused."""
    experiment_data["scenario"] = {"name": "balanced"}

    with pytest.raises(ConfigError):
        run_ablation(ExperimentConfig.from_dict(experiment_data))


def test_fit_model_stores_standardizer(
    small_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that the training standardizer travels with the model."""
    result = fit_model(small_dataset, replace(tiny_config, epochs=1))
    prepared = model_inputs(result.model, small_dataset)

    assert result.model.metadata["train_fingerprint"] == small_dataset.fingerprint
    assert prepared.standardizer is not None
    assert prepared.standardizer.fitted_on == small_dataset.fingerprint
