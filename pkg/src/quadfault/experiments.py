"""Scenario and ablation runs: imbalanced splits, repeated training, aggregation.

Every repeat draws its own imbalanced training subset (seeded by ``seed_base +
repeat``) and all methods of that repeat train on the same subset. The test split
is never subsampled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import TYPE_CHECKING, Any

import numpy as np

from quadfault.config import (
    BALANCED_REFERENCE,
    Method,
    config_hash,
    preset_loss,
)
from quadfault.dataio import (
    Standardizer,
    fit_standardizer,
    load_dataset,
    load_signal,
    load_te_csv,
    split_dataset,
    standardize,
    synthetic_dataset,
    windows_from_runs,
)
from quadfault.exceptions import ConfigError, ContractError
from quadfault.executor import run_cells
from quadfault.log import get_logger
from quadfault.metrics import EvalReport, aggregate, evaluate
from quadfault.models import Cell
from quadfault.pairing import WindowedDataset, apply_imbalance
from quadfault.trainer import train


if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from quadfault.config import DatasetConfig, ExperimentConfig, TrainConfig
    from quadfault.metrics import AggregateReport
    from quadfault.models import BatchResult
    from quadfault.networks import ModelParams
    from quadfault.trainer import TrainResult


logger = get_logger("experiments")


@dataclass
class Splits:
    train: WindowedDataset
    test: WindowedDataset
    normal_class: int | None = None


def load_splits(cfg: DatasetConfig, *, seed: int = 0) -> Splits:
    """Load the balanced train and test splits described by ``cfg``.

    Single-source data (signals, synthetic sets, one container) is split per class
    with ``cfg.test_fraction`` held out.
    """
    window, step = cfg.window_size, cfg.window_step
    match cfg.kind:
        case "te":
            assert cfg.train_path is not None
            assert cfg.test_path is not None
            train_runs = load_te_csv(
                cfg.train_path, cfg.fault_ids, split="train", keep_normal=cfg.keep_normal
            )
            test_runs = load_te_csv(
                cfg.test_path, cfg.fault_ids, split="test", keep_normal=cfg.keep_normal
            )
            train_ds = windows_from_runs(train_runs, window, step)
            test_ds = windows_from_runs(test_runs, window, step)
            return Splits(train_ds, test_ds, train_ds.label_map.get("normal"))
        case "cwru":
            parts = [
                load_signal(s.path, window=window, step=step, label=s.class_id)
                for s in cfg.signals
            ]
            full = WindowedDataset.concat(parts)
            normal = 0 if 0 in full.present_classes else None
        case "synthetic":
            full = synthetic_dataset(cfg.synthetic)
            normal = None
        case "container":
            assert cfg.train_path is not None
            full = load_dataset(cfg.train_path)
            normal = full.label_map.get("normal")
            if cfg.test_path is not None:
                return Splits(full, load_dataset(cfg.test_path), normal)
    train_ds, test_ds = split_dataset(full, cfg.test_fraction, seed=seed)
    return Splits(train_ds, test_ds, normal)


def class_names(ds: WindowedDataset) -> dict[int, str]:
    names = {c: str(c) for c in ds.present_classes}
    names.update({c: name for name, c in ds.label_map.items()})
    return names


def minority_recall(report: EvalReport, classes: Sequence[int]) -> float:
    """Mean recall over ``classes``."""
    if not classes:
        return 0.0
    return float(np.mean([report.per_class[c].recall for c in classes]))


def _check_test_untouched(test: WindowedDataset, counts: Mapping[int, int]) -> None:
    if test.class_counts() != dict(counts):
        msg = f"test split changed: {test.class_counts()} vs {dict(counts)}"
        raise ContractError(msg)


def fit_model(
    train_ds: WindowedDataset,
    train_cfg: TrainConfig,
    *,
    standardize_inputs: bool = True,
    validation_fraction: float = 0.0,
    **options: Any,
) -> TrainResult:
    """Train one model, optionally on standardized inputs with a validation hold-out.

    The standardizer is fitted on the training windows only and stored in the
    model metadata, so `model_inputs` can prepare other data the same way.

    Args:
        train_ds: Training windows
        train_cfg: Training configuration
        standardize_inputs: Fit and apply a per-feature z-score
        validation_fraction: Share of ``train_ds`` held out for early stopping
        options: Passed on to `train` (checkpointing, resume, step log)
    """
    validation = None
    if validation_fraction:
        train_ds, validation = split_dataset(
            train_ds, validation_fraction, seed=train_cfg.seed
        )
    standardizer = None
    if standardize_inputs:
        standardizer = fit_standardizer(train_ds)
        if validation is not None:
            validation = standardize(validation, standardizer, train=train_ds)
        train_ds = standardize(train_ds, standardizer, train=train_ds)
    result = train(train_ds, train_cfg, validation=validation, **options)
    result.model.metadata["train_fingerprint"] = train_ds.fingerprint
    if standardizer is not None:
        result.model.metadata["standardizer"] = standardizer.to_dict()
    return result


def model_inputs(model: ModelParams, ds: WindowedDataset) -> WindowedDataset:
    """Attach the standardizer the model was trained with, if any."""
    stored = model.metadata.get("standardizer")
    if stored is None:
        return ds.with_standardizer(None)
    return ds.with_standardizer(Standardizer.from_dict(stored))


def train_and_evaluate(
    train_ds: WindowedDataset,
    test_ds: WindowedDataset,
    train_cfg: TrainConfig,
    *,
    normal_class: int | None = None,
    standardize_inputs: bool = True,
    validation_fraction: float = 0.0,
    metadata: Mapping[str, Any] | None = None,
) -> EvalReport:
    """Train one model and score it on the test split."""
    result = fit_model(
        train_ds,
        train_cfg,
        standardize_inputs=standardize_inputs,
        validation_fraction=validation_fraction,
    )
    meta = {
        "method": train_cfg.method.value,
        "seed": train_cfg.seed,
        "train_config_hash": result.config_hash,
        "train_fingerprint": result.model.metadata["train_fingerprint"],
        "train_counts": {str(c): n for c, n in result.train_counts.items()},
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "final_loss": result.losses[-1] if result.losses else None,
        **(metadata or {}),
    }
    return evaluate(
        result.model,
        model_inputs(result.model, test_ds),
        normal_class=normal_class,
        metadata=meta,
    )


@dataclass
class Prepared:
    """Loaded splits plus one imbalanced training subset per repeat."""

    splits: Splits
    imbalanced: list[WindowedDataset]
    imbalanced_classes: tuple[int, ...]
    test_counts: dict[int, int]

    @property
    def fingerprints(self) -> dict[str, str]:
        prints = {
            "train": self.splits.train.fingerprint,
            "test": self.splits.test.fingerprint,
        }
        for repeat, ds in enumerate(self.imbalanced):
            prints[f"train.repeat.{repeat}"] = ds.fingerprint
        return prints


def prepare(cfg: ExperimentConfig) -> Prepared:
    splits = load_splits(cfg.dataset, seed=cfg.seed_base)
    test_counts = splits.test.class_counts()
    targets = cfg.scenario.targets(splits.train.label_map)
    imbalanced = [
        apply_imbalance(splits.train, targets, np.random.default_rng(cfg.seed_for(r)))
        for r in range(cfg.repeats)
    ]
    _check_test_untouched(splits.test, test_counts)
    logger.info(
        "Scenario %s: train %s, test %s, subsampled %s",
        cfg.scenario.name,
        splits.train.class_counts(),
        test_counts,
        imbalanced[0].class_counts(),
    )
    return Prepared(
        splits=splits,
        imbalanced=imbalanced,
        imbalanced_classes=tuple(sorted(targets)),
        test_counts=test_counts,
    )


def _cell(
    prepared: Prepared,
    cfg: ExperimentConfig,
    train_cfg: TrainConfig,
    train_ds: WindowedDataset,
    *,
    column: str,
    repeat: int,
    label: str = "",
    extra: Mapping[str, Any] | None = None,
) -> Cell:
    metadata = {"column": column, "repeat": repeat, **(extra or {})}
    run = partial(
        train_and_evaluate,
        train_ds,
        prepared.splits.test,
        train_cfg,
        normal_class=prepared.splits.normal_class,
        standardize_inputs=cfg.dataset.standardize,
        validation_fraction=cfg.validation_fraction,
        metadata=metadata,
    )
    return Cell(
        method=column,
        repeat=repeat,
        seed=train_cfg.seed,
        run=run,
        label=label,
        tags=dict(extra or {}),
    )


def _failures(batch: BatchResult) -> list[dict[str, Any]]:
    return [r.to_dict() for r in batch.failed_cells]


def _cell_records(batch: BatchResult) -> list[dict[str, Any]]:
    records = []
    for r in batch.results:
        record = r.to_dict()
        record["report"] = r.report.to_dict() if r.report is not None else None
        records.append(record)
    return records


@dataclass
class ScenarioResult:
    """Aggregated comparison of methods on one imbalance scenario."""

    name: str
    config: dict[str, Any]
    config_hash: str
    columns: list[str]
    imbalanced_classes: tuple[int, ...]
    class_names: dict[int, str]
    normal_class: int | None
    aggregates: dict[str, AggregateReport]
    cells: list[dict[str, Any]]
    seeds: list[int]
    fingerprints: dict[str, str]
    failures: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "scenario",
            "name": self.name,
            "config": self.config,
            "config_hash": self.config_hash,
            "columns": self.columns,
            "imbalanced_classes": list(self.imbalanced_classes),
            "class_names": {str(c): n for c, n in self.class_names.items()},
            "normal_class": self.normal_class,
            "aggregates": {k: v.to_dict() for k, v in self.aggregates.items()},
            "cells": self.cells,
            "seeds": self.seeds,
            "fingerprints": self.fingerprints,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScenarioResult:
        """Rebuild a result from its JSON form, re-aggregating the cell reports."""
        reports: dict[str, list[EvalReport]] = {}
        for cell in data["cells"]:
            if cell["success"] and cell["report"] is not None:
                report = EvalReport.from_dict(cell["report"])
                reports.setdefault(cell["method"], []).append(report)
        return cls(
            name=data["name"],
            config=data["config"],
            config_hash=data["config_hash"],
            columns=list(data["columns"]),
            imbalanced_classes=tuple(data["imbalanced_classes"]),
            class_names={int(c): n for c, n in data["class_names"].items()},
            normal_class=data["normal_class"],
            aggregates={k: aggregate(v) for k, v in reports.items()},
            cells=list(data["cells"]),
            seeds=list(data["seeds"]),
            fingerprints=dict(data["fingerprints"]),
            failures=list(data["failures"]),
        )


def run_scenario(
    cfg: ExperimentConfig, *, parallel: bool = False, max_workers: int = 1
) -> ScenarioResult:
    """Train and evaluate every method ``cfg.repeats`` times on one scenario.

    A failing cell is recorded and left out of its column's aggregate; the other
    cells still run.
    """
    prepared = prepare(cfg)
    cells = []
    columns = []
    for method in cfg.methods:
        column = method.display_name
        columns.append(column)
        for repeat in range(cfg.repeats):
            train_cfg = cfg.train_config_for(method, repeat)
            cells.append(
                _cell(
                    prepared,
                    cfg,
                    train_cfg,
                    prepared.imbalanced[repeat],
                    column=column,
                    repeat=repeat,
                )
            )
    if cfg.include_balanced_reference:
        columns.append(BALANCED_REFERENCE)
        for repeat in range(cfg.repeats):
            train_cfg = cfg.train_config_for(Method.PLAIN, repeat)
            cells.append(
                _cell(
                    prepared,
                    cfg,
                    train_cfg,
                    prepared.splits.train.with_imbalance(()),
                    column=BALANCED_REFERENCE,
                    repeat=repeat,
                )
            )
    batch = run_cells(cells, parallel=parallel, max_workers=max_workers)
    _check_test_untouched(prepared.splits.test, prepared.test_counts)
    aggregates = {}
    for column in columns:
        reports = batch.reports_for(column)
        if not reports:
            logger.warning("Every cell of %s failed", column)
            continue
        aggregates[column] = aggregate(reports)
    return ScenarioResult(
        name=cfg.scenario.name,
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        columns=columns,
        imbalanced_classes=prepared.imbalanced_classes,
        class_names=class_names(prepared.splits.train),
        normal_class=prepared.splits.normal_class,
        aggregates=aggregates,
        cells=_cell_records(batch),
        seeds=[cfg.seed_for(r) for r in range(cfg.repeats)],
        fingerprints=prepared.fingerprints,
        failures=_failures(batch),
    )


# Ablations


@dataclass(frozen=True)
class AblationPoint:
    """One repeat of one ablation setting."""

    preset: str
    beta: float
    repeat: int
    seed: int
    success: bool
    minority_recall: float | None = None
    macro_recall: float | None = None
    error: str = ""


@dataclass
class AblationResult:
    """Per-repeat minority and macro recall over the preset × β grid."""

    name: str
    config: dict[str, Any]
    config_hash: str
    imbalanced_classes: tuple[int, ...]
    points: list[AblationPoint]
    seeds: list[int]
    fingerprints: dict[str, str]

    @property
    def settings(self) -> list[tuple[str, float]]:
        seen: dict[tuple[str, float], None] = {}
        for p in self.points:
            seen.setdefault((p.preset, p.beta), None)
        return list(seen)

    def points_for(self, preset: str, beta: float) -> list[AblationPoint]:
        return [p for p in self.points if (p.preset, p.beta) == (preset, beta)]

    def summary(self) -> list[dict[str, Any]]:
        """Mean minority and macro recall per setting; empty settings are skipped."""
        rows = []
        for preset, beta in self.settings:
            done = [p for p in self.points_for(preset, beta) if p.success]
            if not done:
                continue
            rows.append({
                "preset": preset,
                "beta": beta,
                "runs": len(done),
                "minority_recall": float(np.mean([p.minority_recall for p in done])),
                "macro_recall": float(np.mean([p.macro_recall for p in done])),
            })
        return rows

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "ablation",
            "name": self.name,
            "config": self.config,
            "config_hash": self.config_hash,
            "imbalanced_classes": list(self.imbalanced_classes),
            "points": [asdict(p) for p in self.points],
            "seeds": self.seeds,
            "fingerprints": self.fingerprints,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AblationResult:
        return cls(
            name=data["name"],
            config=data["config"],
            config_hash=data["config_hash"],
            imbalanced_classes=tuple(data["imbalanced_classes"]),
            points=[AblationPoint(**p) for p in data["points"]],
            seeds=list(data["seeds"]),
            fingerprints=dict(data["fingerprints"]),
        )


def ablation_config(base: TrainConfig, preset: str, beta: float) -> TrainConfig:
    """QDM training settings of one grid cell."""
    loss = replace(preset_loss(base.loss, preset), beta=beta)
    return replace(base, method=Method.QDM, loss=loss)


def run_ablation(
    cfg: ExperimentConfig, *, parallel: bool = False, max_workers: int = 1
) -> AblationResult:
    """Train LSTM-QDM over every preset and β of ``cfg.ablation``."""
    prepared = prepare(cfg)
    if not prepared.imbalanced_classes:
        msg = "an ablation needs at least one imbalanced class in the scenario"
        raise ConfigError(msg)
    cells = []
    for preset in cfg.ablation.presets:
        for beta in cfg.ablation.betas:
            for repeat in range(cfg.repeats):
                base = cfg.train_config_for(Method.QDM, repeat)
                cells.append(
                    _cell(
                        prepared,
                        cfg,
                        ablation_config(base, preset, beta),
                        prepared.imbalanced[repeat],
                        column=preset,
                        repeat=repeat,
                        label=f"{preset}/beta={beta:g}/{repeat}",
                        extra={"preset": preset, "beta": beta},
                    )
                )
    batch = run_cells(cells, parallel=parallel, max_workers=max_workers)
    points = []
    for result in batch.results:
        cell = result.cell
        point = AblationPoint(
            preset=cell.tags["preset"],
            beta=cell.tags["beta"],
            repeat=cell.repeat,
            seed=cell.seed,
            success=result.success,
            error=result.error,
        )
        if result.report is not None:
            point = replace(
                point,
                minority_recall=minority_recall(
                    result.report, prepared.imbalanced_classes
                ),
                macro_recall=result.report.macro_recall,
            )
        points.append(point)
    return AblationResult(
        name=cfg.scenario.name,
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        imbalanced_classes=prepared.imbalanced_classes,
        points=points,
        seeds=[cfg.seed_for(r) for r in range(cfg.repeats)],
        fingerprints=prepared.fingerprints,
    )
