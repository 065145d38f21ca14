"""Core models for experiment batches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any


if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from quadfault.metrics import EvalReport


@dataclass(frozen=True)
class Cell:
    """One independent unit of work: a method trained and evaluated for one seed."""

    method: str
    repeat: int
    seed: int
    run: Callable[[], EvalReport]
    label: str = ""
    tags: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def key(self) -> str:
        return self.label or f"{self.method}/{self.repeat}"


@dataclass
class CellResult:
    """Outcome of one cell. Failures carry the error instead of a report."""

    cell: Cell
    success: bool
    report: EvalReport | None = None
    error: str = ""
    duration: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.cell.key,
            "method": self.cell.method,
            "repeat": self.cell.repeat,
            "seed": self.cell.seed,
            "tags": self.cell.tags,
            "success": self.success,
            "error": self.error,
            "duration": self.duration,
        }


@dataclass
class BatchResult:
    """Results of a batch of cells, in submission order."""

    results: list[CellResult]
    total: int
    successful: int
    failed: int
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: Sequence[CellResult]) -> BatchResult:
        """Create BatchResult from a list of CellResults.

        Args:
            results: List of cell results

        Returns:
            BatchResult with aggregated statistics
        """
        successful = sum(1 for r in results if r.success)
        return cls(
            results=list(results),
            total=len(results),
            successful=successful,
            failed=len(results) - successful,
        )

    @property
    def failed_cells(self) -> list[CellResult]:
        """Get list of cells that raised."""
        return [r for r in self.results if not r.success]

    def reports_for(self, method: str) -> list[EvalReport]:
        return [
            r.report
            for r in self.results
            if r.success and r.report is not None and r.cell.method == method
        ]
