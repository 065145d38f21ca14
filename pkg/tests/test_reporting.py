"""Tests for tables and result bundles."""

from __future__ import annotations

from dataclasses import replace
from typing import TYPE_CHECKING

import pandas as pd
import pytest

from quadfault.exceptions import ParseError
from quadfault.experiments import ScenarioResult, run_ablation, run_scenario
from quadfault.metrics import Summary
from quadfault.reporting import (
    format_summary,
    load_bundle,
    points_frame,
    render_text,
    scenario_rows,
    write_bundle,
)


if TYPE_CHECKING:
    from pathlib import Path

    from quadfault.config import ExperimentConfig


@pytest.fixture
def scenario_result(experiment: ExperimentConfig) -> ScenarioResult:
    return run_scenario(experiment)


def test_format_summary() -> None:
    """Test percentages with and without a spread."""
    assert format_summary(None) == "-"
    assert format_summary(Summary.of([0.5])) == "50.00"
    assert format_summary(Summary.of([0.5, 0.7])) == "60.00 ± 14.14"


def test_scenario_rows(scenario_result: ScenarioResult) -> None:
    """Test that the table lists the thinned class and the averages per metric."""
    table = scenario_rows(scenario_result)

    assert [row[0] for row in table] == [
        "class_2 recall",
        "Average recall",
        "class_2 F1",
        "Average F1",
    ]
    assert all(len(row) == 3 for row in table)
    assert all("±" in cell for row in table for cell in row[1:])


def test_bundle_round_trip(tmp_path: Path, scenario_result: ScenarioResult) -> None:
    """Test that a written bundle reloads into the same table."""
    directory = write_bundle(scenario_result, tmp_path / "bundle")

    assert {p.name for p in directory.iterdir()} == {
        "result.json",
        "table.txt",
        "table.csv",
        "points.csv",
    }
    loaded = load_bundle(directory)
    assert isinstance(loaded, ScenarioResult)
    assert render_text(loaded) == render_text(scenario_result)
    assert (directory / "table.txt").read_text("utf-8") == render_text(loaded)
    csv = pd.read_csv(directory / "table.csv")
    assert list(csv.columns) == ["Metric", "LSTM-QDM", "LSTM"]


def test_points_frame(scenario_result: ScenarioResult) -> None:
    """Test one row per class plus a macro row for every successful cell."""
    frame = points_frame(scenario_result)

    assert len(frame) == 4 * 4
    assert set(frame["column"]) == {"LSTM-QDM", "LSTM"}
    macro = frame[frame["class"] == "macro"]
    assert len(macro) == 4


def test_ablation_bundle(tmp_path: Path, experiment: ExperimentConfig) -> None:
    """Test that an ablation writes its grid and per-repeat points."""
    cfg = replace(experiment, repeats=1)
    result = run_ablation(cfg)
    directory = write_bundle(result, tmp_path)

    table = pd.read_csv(directory / "table.csv")
    points = pd.read_csv(directory / "points.csv")

    assert list(table["Preset"]) == ["A", "A", "D", "D"]
    assert len(points) == 4
    assert load_bundle(directory / "result.json").points == result.points


def test_load_bundle_errors(tmp_path: Path) -> None:
    """Test that missing or foreign result files raise ParseError."""
    with pytest.raises(ParseError):
        load_bundle(tmp_path)

    (tmp_path / "result.json").write_text('{"kind": "model"}')
    with pytest.raises(ParseError, match="unknown result kind"):
        load_bundle(tmp_path)
