"""Tests for running independent cells."""

from __future__ import annotations

import time

import pytest

from quadfault.exceptions import ConfigError
from quadfault.executor import run_cell, run_cells
from quadfault.metrics import ConfusionMatrix, EvalReport, report_from_confusion
from quadfault.models import Cell


def _report(correct: int) -> EvalReport:
    y_true = [0, 0, 1, 1]
    y_pred = [t if i < correct else 1 - t for i, t in enumerate(y_true)]
    return report_from_confusion(ConfusionMatrix.from_predictions(y_true, y_pred, 2))


def _cell(repeat: int, delay: float = 0.0, method: str = "LSTM") -> Cell:
    def run() -> EvalReport:
        time.sleep(delay)
        return _report(repeat % 5)

    return Cell(method=method, repeat=repeat, seed=100 + repeat, run=run)


def _failing_cell() -> Cell:
    def run() -> EvalReport:
        msg = "no data"
        raise ValueError(msg)

    return Cell(method="LSTM", repeat=9, seed=9, run=run, label="broken")


def test_run_cell_success() -> None:
    """Test that a successful cell carries its report."""
    result = run_cell(_cell(4))

    assert result.success
    assert result.report is not None
    assert result.report.accuracy == 1.0
    assert result.cell.key == "LSTM/4"


def test_run_cell_captures_error() -> None:
    """Test that an exception becomes an error string instead of propagating."""
    result = run_cell(_failing_cell())

    assert not result.success
    assert result.report is None
    assert result.error == "ValueError: no data"
    assert result.to_dict()["key"] == "broken"


def test_sequential_keeps_order_and_counts() -> None:
    """Test that sequential runs keep submission order and count failures."""
    batch = run_cells([_cell(0), _failing_cell(), _cell(1)])

    assert [r.cell.repeat for r in batch.results] == [0, 9, 1]
    assert (batch.total, batch.successful, batch.failed) == (3, 2, 1)
    assert [r.cell.key for r in batch.failed_cells] == ["broken"]


def test_stop_on_first_error() -> None:
    """Test that continue_on_error=False stops after a failed cell."""
    batch = run_cells([_failing_cell(), _cell(0)], continue_on_error=False)

    assert batch.total == 1


def test_parallel_results_follow_submission_order() -> None:
    """Test that cells finishing out of order still come back in order."""
    cells = [_cell(0, delay=0.2), _cell(1, delay=0.0), _cell(2, delay=0.1)]

    batch = run_cells(cells, parallel=True, max_workers=3)

    assert [r.cell.repeat for r in batch.results] == [0, 1, 2]
    assert batch.successful == 3


def test_reports_by_column() -> None:
    """Test that reports are grouped by the column that produced them."""
    batch = run_cells([_cell(1), _cell(2, method="LSTM-QDM"), _failing_cell()])

    assert len(batch.reports_for("LSTM")) == 1
    assert len(batch.reports_for("LSTM-QDM")) == 1


def test_invalid_worker_count() -> None:
    """Test that fewer than one worker is refused."""
    with pytest.raises(ConfigError):
        run_cells([_cell(0)], parallel=True, max_workers=0)
