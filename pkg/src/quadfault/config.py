"""Experiment configuration: dataclasses, YAML loading and overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import StrEnum
import hashlib
import json
import os
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import yaml

from quadfault.dataio import SyntheticSpec, cwru_label
from quadfault.exceptions import ConfigError
from quadfault.losses import QuadrupletLossConfig


if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping


WORKERS_ENV = "QUADFAULT_WORKERS"

TE_FAULTS = (1, 5, 6, 8, 12, 16, 20)


class Method(StrEnum):
    QDM = "qdm"
    PLAIN = "plain"
    SIAMESE = "siamese"
    TRIPLET = "triplet"
    OVERSAMPLE = "oversample"

    @property
    def display_name(self) -> str:
        return METHOD_NAMES[self]


METHOD_NAMES: dict[Method, str] = {
    Method.QDM: "LSTM-QDM",
    Method.PLAIN: "LSTM",
    Method.SIAMESE: "LSTM-SIAM",
    Method.TRIPLET: "LSTM-TRIPLET",
    Method.OVERSAMPLE: "Oversample-LSTM",
}
BALANCED_REFERENCE = "Balanced-LSTM"


def _build[T](
    cls: type[T],
    data: Mapping[str, Any] | None,
    where: str,
    converters: Mapping[str, Callable[[Any], Any]] | None = None,
) -> T:
    """Instantiate a config dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        msg = f"{where} must be a mapping, got {type(data).__name__}"
        raise ConfigError(msg)
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        msg = f"unknown keys in {where}: {unknown}"
        raise ConfigError(msg)
    values = dict(data)
    for key, convert in (converters or {}).items():
        if key in values and values[key] is not None:
            values[key] = convert(values[key])
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        msg = f"invalid {where}: {e}"
        raise ConfigError(msg) from e


def _method(value: Any) -> Method:
    try:
        return Method(str(value).lower())
    except ValueError:
        known = ", ".join(m.value for m in Method)
        msg = f"unknown method {value!r}; expected one of {known}"
        raise ConfigError(msg) from None


@dataclass(frozen=True)
class OptimizerConfig:
    kind: Literal["adam", "sgd"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "sgd"):
            msg = f"optimizer must be 'adam' or 'sgd', got {self.kind!r}"
            raise ConfigError(msg)


@dataclass(frozen=True)
class TrainConfig:
    """Model shape, optimization and loss settings for one training run.

    The defaults are the Tennessee-Eastman settings (`te_defaults`).
    """

    method: Method = Method.QDM
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    loss: QuadrupletLossConfig = field(default_factory=QuadrupletLossConfig)
    dropout: float = 0.5
    hidden_size: int = 100
    layer_count: int = 3
    embed_dim: int = 64
    class_count: int = 7
    patience: int = 10
    steps_per_epoch: int | None = None
    anchor_mode: Literal["sample", "class"] = "sample"
    minor_rule: Literal["literal", "prose"] = "literal"
    literal_logit_sigmoid: bool = False
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            msg = f"batch_size must be at least 1, got {self.batch_size}"
            raise ConfigError(msg)
        if not self.learning_rate > 0:
            msg = f"learning_rate must be positive, got {self.learning_rate}"
            raise ConfigError(msg)
        if self.epochs < 1:
            msg = f"epochs must be at least 1, got {self.epochs}"
            raise ConfigError(msg)
        if not 0.0 <= self.dropout < 1.0:
            msg = f"dropout must lie in [0, 1), got {self.dropout}"
            raise ConfigError(msg)
        if self.embed_dim >= self.hidden_size:
            msg = (
                f"embed_dim ({self.embed_dim}) must be smaller than "
                f"hidden_size ({self.hidden_size})"
            )
            raise ConfigError(msg)
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            msg = f"steps_per_epoch must be positive, got {self.steps_per_epoch}"
            raise ConfigError(msg)
        if self.anchor_mode not in ("sample", "class"):
            msg = f"anchor_mode must be 'sample' or 'class', got {self.anchor_mode!r}"
            raise ConfigError(msg)
        if self.minor_rule not in ("literal", "prose"):
            msg = f"minor_rule must be 'literal' or 'prose', got {self.minor_rule!r}"
            raise ConfigError(msg)

    @classmethod
    def te_defaults(cls, **changes: Any) -> TrainConfig:
        """Tennessee-Eastman settings: 3×100 LSTM, 64-d embedding, 7 faults."""
        return replace(cls(), **changes)

    @classmethod
    def cwru_defaults(cls, **changes: Any) -> TrainConfig:
        """Bearing settings: 3×30 LSTM, 15-d embedding, 10 conditions."""
        base = cls(
            batch_size=128,
            learning_rate=5e-2,
            loss=QuadrupletLossConfig.cwru_defaults(),
            dropout=0.1,
            hidden_size=30,
            embed_dim=15,
            class_count=10,
        )
        return replace(base, **changes)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> TrainConfig:
        return _build(
            cls,
            data,
            "train",
            {
                "method": _method,
                "optimizer": lambda v: _build(OptimizerConfig, v, "train.optimizer"),
                "loss": lambda v: _build(QuadrupletLossConfig, v, "train.loss"),
            },
        )

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(self)


@dataclass(frozen=True)
class SignalSource:
    """One bearing recording and the condition it was recorded under."""

    path: str
    location: str = "normal"
    diameter: float | None = None
    label: int | None = None

    @property
    def class_id(self) -> int:
        if self.label is not None:
            return self.label
        return cwru_label(self.location, self.diameter)


@dataclass(frozen=True)
class DatasetConfig:
    """Where the data comes from and how it is windowed.

    ``kind`` selects the loader: ``te`` (train/test CSV exports), ``cwru``
    (one signal file per condition, split per class), ``synthetic`` or
    ``container`` (a saved dataset, split per class).
    """

    kind: Literal["te", "cwru", "synthetic", "container"] = "synthetic"
    train_path: str | None = None
    test_path: str | None = None
    fault_ids: tuple[int, ...] = TE_FAULTS
    keep_normal: bool = False
    window: int | None = None
    step: int | None = None
    signals: tuple[SignalSource, ...] = ()
    test_fraction: float = 0.1
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    standardize: bool = True

    def __post_init__(self) -> None:
        kinds = ("te", "cwru", "synthetic", "container")
        if self.kind not in kinds:
            msg = f"dataset kind must be one of {kinds}, got {self.kind!r}"
            raise ConfigError(msg)
        if self.kind == "te" and not (self.train_path and self.test_path):
            msg = "a TE dataset needs both train_path and test_path"
            raise ConfigError(msg)
        if self.kind == "cwru" and not self.signals:
            msg = "a CWRU dataset needs at least one entry under signals"
            raise ConfigError(msg)
        if self.kind == "container" and not self.train_path:
            msg = "a container dataset needs train_path"
            raise ConfigError(msg)

    @property
    def window_size(self) -> int:
        if self.window is not None:
            return self.window
        return {"te": 100, "cwru": 400}.get(self.kind, self.synthetic.length)

    @property
    def window_step(self) -> int:
        if self.step is not None:
            return self.step
        return {"te": 1, "cwru": 32}.get(self.kind, self.window_size)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> DatasetConfig:
        return _build(
            cls,
            data,
            "dataset",
            {
                "fault_ids": lambda v: tuple(int(f) for f in v),
                "signals": lambda v: tuple(
                    _build(SignalSource, s, "dataset.signals") for s in v
                ),
                "synthetic": SyntheticSpec.from_dict,
            },
        )


@dataclass(frozen=True)
class ScenarioConfig:
    """Which training classes are thinned out, and how far.

    Classes are given as class ids or label names (``fault_8``). ``counts`` sets
    absolute targets; otherwise every listed class keeps ``1/ratio`` of its windows.
    """

    name: str = "scenario"
    imbalanced_classes: tuple[int | str, ...] = ()
    ratio: float = 10.0
    counts: dict[int | str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.ratio >= 1:
            msg = f"imbalance ratio must be at least 1, got {self.ratio}"
            raise ConfigError(msg)

    def targets(self, label_map: Mapping[str, int]) -> dict[int, float | int]:
        """Per-class keep fraction (float) or count (int) for `apply_imbalance`."""
        if self.counts:
            return {resolve_class(k, label_map): int(v) for k, v in self.counts.items()}
        return {
            resolve_class(c, label_map): 1.0 / self.ratio for c in self.imbalanced_classes
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> ScenarioConfig:
        return _build(
            cls,
            data,
            "scenario",
            {"imbalanced_classes": tuple, "counts": dict, "ratio": float},
        )


def resolve_class(value: int | str, label_map: Mapping[str, int]) -> int:
    if isinstance(value, int):
        return value
    if value in label_map:
        return label_map[value]
    if value.isdigit():
        return int(value)
    msg = f"unknown class {value!r}; known labels: {sorted(label_map)}"
    raise ConfigError(msg)


# Settings with M2 = M or unit weights deliberately break the loss constraints.
ABLATION_PRESETS: dict[str, dict[str, bool]] = {
    "A": {"separate_margins": False, "weighted": False},
    "B": {"separate_margins": False, "weighted": True},
    "C": {"separate_margins": True, "weighted": False},
    "D": {"separate_margins": True, "weighted": True},
}
BETA_GRID = (1e-1, 1e-2, 1e-3, 1e-4)


def preset_loss(base: QuadrupletLossConfig, preset: str) -> QuadrupletLossConfig:
    """Loss settings of an ablation preset derived from ``base``.

    A: ``M2 = M``, unit weights. B: ``M2 = M``, base weights. C: base margins,
    unit weights. D: ``base`` itself.
    """
    try:
        spec = ABLATION_PRESETS[preset.upper()]
    except KeyError:
        msg = f"unknown ablation preset {preset!r}; expected one of A, B, C, D"
        raise ConfigError(msg) from None
    return replace(
        base,
        margin2=base.margin2 if spec["separate_margins"] else base.margin,
        lambda_pos=base.lambda_pos if spec["weighted"] else 1.0,
        lambda_minor=base.lambda_minor if spec["weighted"] else 1.0,
        enforce_constraints=spec["separate_margins"] and spec["weighted"],
    )


@dataclass(frozen=True)
class AblationConfig:
    presets: tuple[str, ...] = ("A", "B", "C", "D")
    betas: tuple[float, ...] = BETA_GRID

    def __post_init__(self) -> None:
        for preset in self.presets:
            if preset.upper() not in ABLATION_PRESETS:
                msg = f"unknown ablation preset {preset!r}"
                raise ConfigError(msg)
        if any(b < 0 for b in self.betas):
            msg = f"beta values must be nonnegative, got {self.betas}"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> AblationConfig:
        return _build(
            cls,
            data,
            "ablation",
            {
                "presets": lambda v: tuple(str(p).upper() for p in v),
                "betas": lambda v: tuple(float(b) for b in v),
            },
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """A full comparison: data, imbalance scenario, methods and repeats."""

    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    methods: tuple[Method, ...] = (
        Method.QDM,
        Method.PLAIN,
        Method.SIAMESE,
        Method.OVERSAMPLE,
    )
    train: TrainConfig = field(default_factory=TrainConfig)
    method_overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    repeats: int = 10
    seed_base: int = 0
    output_dir: str = "results"
    include_balanced_reference: bool = False
    validation_fraction: float = 0.0
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self) -> None:
        if self.repeats < 1:
            msg = f"repeats must be at least 1, got {self.repeats}"
            raise ConfigError(msg)
        if not self.methods:
            msg = "at least one method is required"
            raise ConfigError(msg)
        for name in self.method_overrides:
            _method(name)
        if not 0.0 <= self.validation_fraction < 1.0:
            msg = (
                "validation_fraction must lie in [0, 1), "
                f"got {self.validation_fraction}"
            )
            raise ConfigError(msg)

    def seed_for(self, repeat: int) -> int:
        return self.seed_base + repeat

    def train_config_for(self, method: Method, repeat: int) -> TrainConfig:
        """Training settings of one cell: base settings, method overrides, seed."""
        data = self.train.to_dict()
        overrides = self.method_overrides.get(method.value, {})
        merged = _deep_merge(data, overrides)
        merged["method"] = method.value
        merged["seed"] = self.seed_for(repeat)
        return TrainConfig.from_dict(merged)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> ExperimentConfig:
        return _build(
            cls,
            data,
            "experiment",
            {
                "dataset": DatasetConfig.from_dict,
                "scenario": ScenarioConfig.from_dict,
                "methods": lambda v: tuple(_method(m) for m in v),
                "train": TrainConfig.from_dict,
                "method_overrides": lambda v: {
                    _method(k).value: dict(o) for k, o in v.items()
                },
                "ablation": AblationConfig.from_dict,
            },
        )

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(self)


def _deep_merge(base: Mapping[str, Any], changes: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_overrides(data: Mapping[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``dotted.key=value`` assignments; values are parsed as YAML scalars.

    Args:
        data: Raw configuration mapping
        overrides: Assignments such as ``train.epochs=5`` or ``methods=[qdm, plain]``

    Returns:
        A new mapping with the assignments applied
    """
    result = json.loads(json.dumps(dict(data)))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            msg = f"override must look like key=value, got {item!r}"
            raise ConfigError(msg)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            msg = f"cannot parse value of override {item!r}: {e}"
            raise ConfigError(msg) from e
        node = result
        *parents, leaf = key.strip().split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                msg = f"cannot set {key!r}: {part!r} is not a mapping"
                raise ConfigError(msg)
            node = child
        node[leaf] = value
    return result


def load_experiment(
    path: str | Path | None, overrides: Iterable[str] = ()
) -> ExperimentConfig:
    """Read an experiment YAML file and apply command-line overrides.

    Args:
        path: YAML file; ``None`` starts from the defaults
        overrides: ``dotted.key=value`` assignments

    Raises:
        ConfigError: Unreadable file, unknown keys or invalid values
    """
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text("utf-8"))
        except (OSError, yaml.YAMLError) as e:
            msg = f"cannot read config {path}: {e}"
            raise ConfigError(msg) from e
        if loaded is not None and not isinstance(loaded, dict):
            msg = f"config {path} must contain a mapping at the top level"
            raise ConfigError(msg)
        data = loaded or {}
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


def to_jsonable(obj: Any) -> Any:
    """Plain JSON-compatible structure for dataclasses, enums and numpy values."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return {k: to_jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, StrEnum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list | tuple):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, frozenset | set):
        return sorted(to_jsonable(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(obj: Any) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    canonical = json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def default_workers() -> int:
    """Worker-pool size from ``QUADFAULT_WORKERS``, else the CPU count."""
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        workers = int(raw)
    except ValueError:
        msg = f"{WORKERS_ENV} must be an integer, got {raw!r}"
        raise ConfigError(msg) from None
    if workers < 1:
        msg = f"{WORKERS_ENV} must be at least 1, got {workers}"
        raise ConfigError(msg)
    return workers
