"""Per-class recall and F1, macro averages and multi-run aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from sklearn.metrics import confusion_matrix

from quadfault.exceptions import ContractError, MetricsError
from quadfault.networks import predict


if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray

    from quadfault.networks import ModelParams
    from quadfault.pairing import WindowedDataset


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[i, j]``: samples of true class i predicted as class j."""

    counts: NDArray

    @classmethod
    def from_predictions(
        cls, y_true: ArrayLike, y_pred: ArrayLike, class_count: int
    ) -> ConfusionMatrix:
        counts = confusion_matrix(y_true, y_pred, labels=np.arange(class_count))
        return cls(np.asarray(counts, dtype=np.int64))

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> NDArray:
        return np.diag(self.counts)

    @property
    def fn(self) -> NDArray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def fp(self) -> NDArray:
        return self.counts.sum(axis=0) - self.tp


@dataclass(frozen=True)
class ClassMetrics:
    recall: float
    f1: float
    tp: int
    fn: int
    fp: int

    @property
    def support(self) -> int:
        return self.tp + self.fn

    @property
    def zero_support(self) -> bool:
        return self.support == 0

    @classmethod
    def from_counts(cls, tp: int, fn: int, fp: int) -> ClassMetrics:
        """One-vs-rest rates; a zero denominator yields 0."""
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fn + fp) if tp + fn + fp else 0.0
        return cls(recall=recall, f1=f1, tp=int(tp), fn=int(fn), fp=int(fp))


def _macro(
    per_class: Mapping[int, ClassMetrics], classes: Sequence[int]
) -> tuple[float, float]:
    if not classes:
        return 0.0, 0.0
    recall = float(np.mean([per_class[c].recall for c in classes]))
    f1 = float(np.mean([per_class[c].f1 for c in classes]))
    return recall, f1


@dataclass
class EvalReport:
    """Evaluation of one model on one dataset.

    Macro values average over classes with nonzero support. When ``normal_class``
    is set, ``fault_macro_*`` average over the remaining classes only.
    """

    per_class: dict[int, ClassMetrics]
    macro_recall: float
    macro_f1: float
    confusion: ConfusionMatrix
    normal_class: int | None = None
    fault_macro_recall: float | None = None
    fault_macro_f1: float | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.per_class))

    @property
    def flagged(self) -> list[int]:
        """Classes without any evaluated sample."""
        return [c for c, m in self.per_class.items() if m.zero_support]

    @property
    def accuracy(self) -> float:
        total = self.confusion.total
        return float(self.confusion.tp.sum() / total) if total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_class": {
                str(c): {
                    "recall": m.recall, "f1": m.f1, "tp": m.tp, "fn": m.fn, "fp": m.fp
                }
                for c, m in sorted(self.per_class.items())
            },
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "fault_macro_recall": self.fault_macro_recall,
            "fault_macro_f1": self.fault_macro_f1,
            "normal_class": self.normal_class,
            "zero_support": self.flagged,
            "confusion": self.confusion.counts.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EvalReport:
        confusion = ConfusionMatrix(np.asarray(data["confusion"], dtype=np.int64))
        return report_from_confusion(
            confusion, normal_class=data.get("normal_class"), metadata=data["metadata"]
        )


def report_from_confusion(
    confusion: ConfusionMatrix,
    *,
    normal_class: int | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> EvalReport:
    tp, fn, fp = confusion.tp, confusion.fn, confusion.fp
    per_class = {
        c: ClassMetrics.from_counts(int(tp[c]), int(fn[c]), int(fp[c]))
        for c in range(confusion.class_count)
    }
    present = [c for c, m in per_class.items() if not m.zero_support]
    macro_recall, macro_f1 = _macro(per_class, present)
    fault_recall = fault_f1 = None
    if normal_class is not None:
        faults = [c for c in present if c != normal_class]
        fault_recall, fault_f1 = _macro(per_class, faults)
    return EvalReport(
        per_class=per_class,
        macro_recall=macro_recall,
        macro_f1=macro_f1,
        confusion=confusion,
        normal_class=normal_class,
        fault_macro_recall=fault_recall,
        fault_macro_f1=fault_f1,
        metadata=dict(metadata or {}),
    )


def predict_dataset(
    model: ModelParams, ds: WindowedDataset, *, batch_size: int = 512
) -> NDArray:
    """Predicted class of every window, computed chunk by chunk."""
    chunks = [
        predict(model, ds.gather(np.arange(start, min(start + batch_size, len(ds)))))
        for start in range(0, len(ds), batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)


def evaluate(
    model: ModelParams,
    ds: WindowedDataset,
    *,
    normal_class: int | None = None,
    metadata: Mapping[str, Any] | None = None,
    batch_size: int = 512,
) -> EvalReport:
    """Diagnose every window of ``ds`` and score the arg-max predictions.

    Raises:
        ContractError: The dataset is empty or has labels the model cannot output
    """
    if len(ds) == 0:
        msg = "cannot evaluate on an empty dataset"
        raise ContractError(msg)
    if int(ds.labels.max()) >= model.class_count:
        msg = (
            f"dataset has class {int(ds.labels.max())}, "
            f"model predicts only {model.class_count} classes"
        )
        raise ContractError(msg)
    predictions = predict_dataset(model, ds, batch_size=batch_size)
    confusion = ConfusionMatrix.from_predictions(
        ds.labels, predictions, model.class_count
    )
    meta = {"dataset_fingerprint": ds.fingerprint, **(metadata or {})}
    return report_from_confusion(confusion, normal_class=normal_class, metadata=meta)


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    values: tuple[float, ...]

    @classmethod
    def of(cls, values: Sequence[float]) -> Summary:
        data = np.asarray(values, dtype=np.float64)
        points = tuple(float(v) for v in data)
        # Identical values summarize exactly, without summation rounding.
        if np.ptp(data) == 0:
            return cls(mean=points[0], std=0.0, values=points)
        return cls(mean=float(data.mean()), std=float(data.std(ddof=1)), values=points)


@dataclass
class AggregateReport:
    """Mean and sample standard deviation of every metric over repeated runs."""

    classes: tuple[int, ...]
    recall: dict[int, Summary]
    f1: dict[int, Summary]
    macro_recall: Summary
    macro_f1: Summary
    fault_macro_recall: Summary | None
    fault_macro_f1: Summary | None
    runs: list[dict[str, Any]]

    @property
    def count(self) -> int:
        return len(self.runs)

    def to_dict(self) -> dict[str, Any]:
        def _summary(s: Summary | None) -> dict[str, Any] | None:
            if s is None:
                return None
            return {"mean": s.mean, "std": s.std, "values": list(s.values)}

        return {
            "classes": list(self.classes),
            "recall": {str(c): _summary(s) for c, s in self.recall.items()},
            "f1": {str(c): _summary(s) for c, s in self.f1.items()},
            "macro_recall": _summary(self.macro_recall),
            "macro_f1": _summary(self.macro_f1),
            "fault_macro_recall": _summary(self.fault_macro_recall),
            "fault_macro_f1": _summary(self.fault_macro_f1),
            "runs": self.runs,
        }


def aggregate(reports: Sequence[EvalReport]) -> AggregateReport:
    """Combine reports of repeated runs over the same classes.

    Raises:
        MetricsError: No reports, or reports over different class sets
    """
    if not reports:
        msg = "cannot aggregate zero reports"
        raise MetricsError(msg)
    classes = reports[0].classes
    for report in reports[1:]:
        if report.classes != classes:
            msg = f"class sets differ: {list(classes)} vs {list(report.classes)}"
            raise MetricsError(msg)
    fault_recall = fault_f1 = None
    if all(r.fault_macro_recall is not None for r in reports):
        fault_recall = Summary.of([r.fault_macro_recall or 0.0 for r in reports])
        fault_f1 = Summary.of([r.fault_macro_f1 or 0.0 for r in reports])
    return AggregateReport(
        classes=classes,
        recall={c: Summary.of([r.per_class[c].recall for r in reports]) for c in classes},
        f1={c: Summary.of([r.per_class[c].f1 for r in reports]) for c in classes},
        macro_recall=Summary.of([r.macro_recall for r in reports]),
        macro_f1=Summary.of([r.macro_f1 for r in reports]),
        fault_macro_recall=fault_recall,
        fault_macro_f1=fault_f1,
        runs=[r.metadata for r in reports],
    )
