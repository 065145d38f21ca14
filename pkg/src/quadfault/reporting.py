"""Comparison tables and result bundles."""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import TYPE_CHECKING, Any

import pandas as pd
from rich.console import Console
from rich.table import Table

from quadfault.exceptions import ParseError
from quadfault.experiments import AblationResult, ScenarioResult
from quadfault.log import get_logger


if TYPE_CHECKING:
    from quadfault.metrics import AggregateReport, Summary


logger = get_logger("reporting")

RESULT_FILE = "result.json"


def format_summary(summary: Summary | None) -> str:
    """Percentages as ``mean ± std``; a single run shows the mean only."""
    if summary is None:
        return "-"
    if len(summary.values) < 2:  # noqa: PLR2004
        return f"{summary.mean * 100:.2f}"
    return f"{summary.mean * 100:.2f} ± {summary.std * 100:.2f}"


def _average(report: AggregateReport, kind: str) -> Summary:
    fault = getattr(report, f"fault_macro_{kind}")
    return fault if fault is not None else getattr(report, f"macro_{kind}")


def scenario_rows(result: ScenarioResult) -> list[list[str]]:
    """Rows of the comparison table: per-class recall, average, per-class F1, average.

    Only the subsampled classes get their own rows; without any, every class does.
    """
    classes = list(result.imbalanced_classes)
    if not classes:
        classes = sorted(result.class_names)
    table_rows = []
    for kind, title in (("recall", "recall"), ("f1", "F1")):
        for cls in classes:
            row = [f"{result.class_names.get(cls, str(cls))} {title}"]
            for column in result.columns:
                report = result.aggregates.get(column)
                per_class = getattr(report, kind) if report is not None else {}
                row.append(format_summary(per_class.get(cls)))
            table_rows.append(row)
        average = [f"Average {title}"]
        for column in result.columns:
            report = result.aggregates.get(column)
            average.append(format_summary(_average(report, kind) if report else None))
        table_rows.append(average)
    return table_rows


def ablation_rows(result: AblationResult) -> list[list[str]]:
    return [
        [
            row["preset"],
            f"{row['beta']:g}",
            str(row["runs"]),
            f"{row['minority_recall'] * 100:.2f}",
            f"{row['macro_recall'] * 100:.2f}",
        ]
        for row in result.summary()
    ]


ABLATION_HEADER = ["Preset", "beta", "Runs", "Minority recall", "Macro recall"]


def header(result: ScenarioResult | AblationResult) -> list[str]:
    if isinstance(result, AblationResult):
        return ABLATION_HEADER
    return ["Metric", *result.columns]


def rows(result: ScenarioResult | AblationResult) -> list[list[str]]:
    if isinstance(result, AblationResult):
        return ablation_rows(result)
    return scenario_rows(result)


def build_table(result: ScenarioResult | AblationResult) -> Table:
    """Rich table of a scenario comparison or an ablation grid."""
    table = Table(title=f"{result.name} ({result.config_hash})")
    for index, name in enumerate(header(result)):
        if index == 0:
            table.add_column(name, style="cyan")
        else:
            table.add_column(name, justify="right")
    for row in rows(result):
        table.add_row(*row)
    return table


def render_text(result: ScenarioResult | AblationResult, *, width: int = 120) -> str:
    console = Console(record=True, width=width, file=io.StringIO())
    console.print(build_table(result))
    return console.export_text()


def points_frame(result: ScenarioResult | AblationResult) -> pd.DataFrame:
    """Per-repeat raw values, one row per point, ready for box plots."""
    if isinstance(result, AblationResult):
        return pd.DataFrame([
            {
                "preset": p.preset,
                "beta": p.beta,
                "repeat": p.repeat,
                "seed": p.seed,
                "success": p.success,
                "minority_recall": p.minority_recall,
                "macro_recall": p.macro_recall,
            }
            for p in result.points
        ])
    records: list[dict[str, Any]] = []
    for cell in result.cells:
        report = cell.get("report")
        if not cell["success"] or report is None:
            continue
        base = {"column": cell["method"], "repeat": cell["repeat"], "seed": cell["seed"]}
        for cls, values in report["per_class"].items():
            records.append({
                **base,
                "class": int(cls),
                "recall": values["recall"],
                "f1": values["f1"],
            })
        records.append({
            **base,
            "class": "macro",
            "recall": report["macro_recall"],
            "f1": report["macro_f1"],
        })
    columns = ["column", "repeat", "seed", "class", "recall", "f1"]
    return pd.DataFrame(records, columns=columns)


def write_bundle(result: ScenarioResult | AblationResult, directory: str | Path) -> Path:
    """Write ``result.json``, ``table.txt``, ``table.csv`` and ``points.csv``.

    Returns:
        The bundle directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(result.to_dict(), indent=2, sort_keys=True)
    (directory / RESULT_FILE).write_text(payload + "\n", "utf-8")
    (directory / "table.txt").write_text(render_text(result), "utf-8")
    table = pd.DataFrame(rows(result), columns=header(result))
    table.to_csv(directory / "table.csv", index=False)
    points_frame(result).to_csv(directory / "points.csv", index=False)
    logger.info("Wrote result bundle to %s", directory)
    return directory


def load_bundle(path: str | Path) -> ScenarioResult | AblationResult:
    """Read a bundle directory (or its ``result.json``) back into a result."""
    path = Path(path)
    if path.is_dir():
        path /= RESULT_FILE
    try:
        data = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        msg = f"cannot read result bundle: {e}"
        raise ParseError(msg, path=str(path)) from e
    match data.get("kind"):
        case "scenario":
            return ScenarioResult.from_dict(data)
        case "ablation":
            return AblationResult.from_dict(data)
        case other:
            msg = f"unknown result kind {other!r}"
            raise ParseError(msg, path=str(path))
