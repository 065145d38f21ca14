"""Dataset ingestion, synthetic data and the internal dataset container."""

from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path
import re
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from sklearn.neighbors import NearestCentroid

from quadfault.exceptions import ConfigError, ContractError, ParseError
from quadfault.log import get_logger
from quadfault.networks import read_npz
from quadfault.pairing import WindowedDataset, make_windows


if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray


logger = get_logger("dataio")

Split = Literal["train", "test"]

TE_FAULT_RANGE = range(1, 21)
# Rows recorded before the fault is introduced.
TE_NORMAL_PREFIX: dict[str, int] = {"train": 20, "test": 160}
TE_GROUP_COLUMNS = ("faultNumber", "simulationRun", "sample")
TE_FILE_PATTERN = re.compile(r"d(?P<fault>\d{2})(?P<test>_te)?\.(dat|csv|txt)$")

CWRU_DIAMETERS = (0.007, 0.014, 0.021)
# Some tables list the largest defect as 0.022 inch.
CWRU_DIAMETER_ALIASES: dict[float, float] = {0.022: 0.021}
CWRU_LOCATIONS: dict[str, int] = {"ball": 1, "inner": 4, "outer": 7}
CWRU_ALIASES: dict[str, str] = {
    "b": "ball",
    "ir": "inner",
    "inner_race": "inner",
    "or": "outer",
    "outer_race": "outer",
}

CONTAINER_FORMAT = 1


@dataclass
class RawRun:
    """One recording: ``[n×m]`` readings with a class id per row."""

    values: NDArray
    labels: NDArray
    source: str
    label_map: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.values) != len(self.labels):
            msg = f"{self.source}: {len(self.values)} rows but {len(self.labels)} labels"
            raise ContractError(msg)
        if np.isnan(self.values).any():
            msg = f"{self.source}: recording contains missing values"
            raise ContractError(msg)

    def __len__(self) -> int:
        return len(self.values)


# Tennessee-Eastman runs


def _fault_ids(fault_ids: Iterable[int]) -> list[int]:
    ids = [int(f) for f in fault_ids]
    unknown = [f for f in ids if f not in TE_FAULT_RANGE]
    if unknown:
        msg = f"unknown fault ids {unknown}; TE faults are numbered 1-20"
        raise ConfigError(msg)
    if len(set(ids)) != len(ids):
        msg = f"fault ids must be unique, got {ids}"
        raise ConfigError(msg)
    if not ids:
        msg = "at least one fault id is required"
        raise ConfigError(msg)
    return ids


def te_label_map(
    fault_ids: Sequence[int], *, keep_normal: bool = False
) -> dict[str, int]:
    """Contiguous class ids for the selected faults, in the given order.

    With ``keep_normal`` the normal condition becomes the last class.
    """
    mapping = {f"fault_{f}": index for index, f in enumerate(fault_ids)}
    if keep_normal:
        mapping["normal"] = len(fault_ids)
    return mapping


def _has_header(path: Path, sep: str) -> bool:
    with path.open(encoding="utf-8") as f:
        first = f.readline().strip()
    if not first:
        msg = "file is empty"
        raise ParseError(msg, path=str(path), line=1)
    tokens = [t for t in re.split(sep, first) if t]
    try:
        [float(t) for t in tokens]
    except ValueError:
        return True
    return False


def read_numeric_table(path: str | Path) -> pd.DataFrame:
    """Read a comma- or whitespace-separated numeric table.

    Raises:
        ParseError: Empty file or a non-numeric cell; the message names the line
    """
    path = Path(path)
    sep = "," if path.suffix == ".csv" else r"\s+"
    has_header = _has_header(path, sep)
    try:
        frame = pd.read_csv(
            path, sep=sep, header=0 if has_header else None, engine="python"
        )
    except pd.errors.EmptyDataError as e:
        msg = "file has no data rows"
        raise ParseError(msg, path=str(path)) from e
    except pd.errors.ParserError as e:
        raise ParseError(str(e), path=str(path)) from e
    if frame.empty:
        msg = "file has no data rows"
        raise ParseError(msg, path=str(path))
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        line = row + (2 if has_header else 1)
        msg = f"non-numeric or missing value in row {row}"
        raise ParseError(msg, path=str(path), line=line)
    return numeric


def _te_run(
    values: NDArray,
    fault: int,
    *,
    label_map: Mapping[str, int],
    prefix: int,
    keep_normal: bool,
    source: str,
) -> RawRun | None:
    fault_class = label_map.get(f"fault_{fault}")
    if fault == 0:
        if not keep_normal:
            return None
        labels = np.full(len(values), label_map["normal"], dtype=np.int64)
        return RawRun(values, labels, source, dict(label_map))
    if fault_class is None:
        return None
    labels = np.full(len(values), fault_class, dtype=np.int64)
    if keep_normal:
        labels[:prefix] = label_map["normal"]
    else:
        values, labels = values[prefix:], labels[prefix:]
    if len(values) == 0:
        return None
    return RawRun(values, labels, source, dict(label_map))


def load_te_csv(
    path: str | Path,
    fault_ids: Iterable[int],
    *,
    split: Split = "train",
    keep_normal: bool = False,
    fault_id: int | None = None,
) -> list[RawRun]:
    """Load Tennessee-Eastman runs and label every row.

    Two layouts are understood: a long table with ``faultNumber`` (and optionally
    ``simulationRun`` / ``sample``) columns holding many runs, and a single-run file
    (``d08.dat``, ``d08_te.dat``) whose fault comes from ``fault_id`` or the file name.

    The first 20 rows of a training run (160 of a test run) precede the fault and
    are labelled normal. They are dropped unless ``keep_normal`` is set, in which
    case they form an extra class after the faults.

    Args:
        path: Input file
        fault_ids: Faults to keep; their order fixes the class ids
        split: Which prefix rule applies
        keep_normal: Keep pre-fault rows (and fault-free runs) as a normal class
        fault_id: Fault of a single-run file

    Raises:
        ConfigError: A fault id is outside 1-20 or missing from the file
        ParseError: The file is empty or has a malformed row
    """
    path = Path(path)
    ids = _fault_ids(fault_ids)
    if split not in TE_NORMAL_PREFIX:
        msg = f"split must be 'train' or 'test', got {split!r}"
        raise ConfigError(msg)
    prefix = TE_NORMAL_PREFIX[split]
    label_map = te_label_map(ids, keep_normal=keep_normal)
    frame = read_numeric_table(path)
    runs: list[RawRun] = []
    if "faultNumber" in frame.columns:
        present = {int(f) for f in frame["faultNumber"].unique()}
        missing = [f for f in ids if f not in present]
        if missing:
            msg = f"{path}: faults {missing} do not occur in the file"
            raise ConfigError(msg)
        keys = [c for c in ("faultNumber", "simulationRun") if c in frame.columns]
        features = [c for c in frame.columns if c not in TE_GROUP_COLUMNS]
        for key, group in frame.groupby(keys, sort=True):
            parts = key if isinstance(key, tuple) else (key,)
            if "sample" in group.columns:
                group = group.sort_values("sample")
            run = _te_run(
                group[features].to_numpy(dtype=np.float64),
                int(parts[0]),
                label_map=label_map,
                prefix=prefix,
                keep_normal=keep_normal,
                source=f"{path.name}:" + "/".join(str(int(p)) for p in parts),
            )
            if run is not None:
                runs.append(run)
    else:
        if fault_id is None:
            match = TE_FILE_PATTERN.search(path.name)
            if match is None:
                msg = f"{path}: cannot tell the fault of a single-run file"
                raise ConfigError(msg)
            fault_id = int(match["fault"])
        if fault_id not in ids and not (fault_id == 0 and keep_normal):
            msg = f"{path}: fault {fault_id} is not among the selected faults {ids}"
            raise ConfigError(msg)
        run = _te_run(
            frame.to_numpy(dtype=np.float64),
            fault_id,
            label_map=label_map,
            prefix=prefix,
            keep_normal=keep_normal,
            source=path.name,
        )
        if run is not None:
            runs.append(run)
    logger.info("Loaded %d TE runs from %s", len(runs), path)
    return runs


def windows_from_runs(
    runs: Sequence[RawRun],
    window: int,
    step: int,
    *,
    imbalance_set: Iterable[int] = (),
) -> WindowedDataset:
    """Window every run separately so no window spans two recordings."""
    if not runs:
        msg = "no runs to window"
        raise ContractError(msg)
    parts = []
    for run in runs:
        if len(run) < window:
            logger.warning(
                "Skipping %s: %d rows is shorter than the window", run.source, len(run)
            )
            continue
        parts.append(
            make_windows(run.values, run.labels, window, step, label_map=run.label_map)
        )
    if not parts:
        msg = f"every run is shorter than the window of {window} rows"
        raise ContractError(msg)
    return WindowedDataset.concat(parts).with_imbalance(imbalance_set)


# CWRU-style signals


def cwru_label(location: str, diameter: float | None = None) -> int:
    """Class id of a bearing condition.

    Normal is 0; ball, inner race and outer race defects of 0.007, 0.014 and
    0.021 inch take ids 1-3, 4-6 and 7-9; 0.022 is read as 0.021.
    """
    key = location.strip().lower()
    key = CWRU_ALIASES.get(key, key)
    if key == "normal":
        return 0
    if key not in CWRU_LOCATIONS:
        msg = f"unknown defect location {location!r}"
        raise ConfigError(msg)
    for alias, canonical in CWRU_DIAMETER_ALIASES.items():
        if diameter is not None and abs(diameter - alias) < 1e-9:  # noqa: PLR2004
            diameter = canonical
    for index, known in enumerate(CWRU_DIAMETERS):
        if diameter is not None and abs(diameter - known) < 1e-9:  # noqa: PLR2004
            return CWRU_LOCATIONS[key] + index
    msg = f"unknown defect diameter {diameter!r}; expected one of {CWRU_DIAMETERS}"
    raise ConfigError(msg)


def read_signal(path: str | Path) -> NDArray:
    """Read a signal from ``.npy`` or from text with one value (or row) per line."""
    path = Path(path)
    if path.suffix == ".npy":
        try:
            values = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise ParseError(str(e), path=str(path)) from e
        values = np.asarray(values, dtype=np.float64)
    else:
        values = read_numeric_table(path).to_numpy(dtype=np.float64)
    if values.ndim == 2 and values.shape[1] == 1:  # noqa: PLR2004
        values = values[:, 0]
    if values.size == 0:
        msg = "signal is empty"
        raise ParseError(msg, path=str(path))
    return values


def load_signal(
    path: str | Path,
    *,
    window: int = 400,
    step: int = 32,
    label: int,
    name: str | None = None,
) -> WindowedDataset:
    """Window one vibration recording; every window carries ``label``.

    Raises:
        ContractError: The signal is shorter than one window
    """
    path = Path(path)
    values = read_signal(path)
    labels = np.full(len(values), label, dtype=np.int64)
    return make_windows(
        values, labels, window, step, label_map={name or path.stem: int(label)}
    )


# Synthetic sequences


@dataclass(frozen=True)
class Regime:
    """Per-class generating process ``slope·t + amplitude·sin(frequency·t + φ)``."""

    slope: float
    amplitude: float
    frequency: float


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 4
    samples_per_class: int = 500
    length: int = 32
    channels: int = 2
    noise: float = 0.5
    phase_jitter: float = 0.3
    seed: int = 0
    regimes: tuple[Regime, ...] = ()

    def __post_init__(self) -> None:
        if self.class_count < 2:  # noqa: PLR2004
            msg = f"need at least 2 classes, got {self.class_count}"
            raise ConfigError(msg)
        for name in ("samples_per_class", "length", "channels"):
            if getattr(self, name) < 1:
                msg = f"{name} must be positive"
                raise ConfigError(msg)
        if self.noise < 0 or self.phase_jitter < 0:
            msg = "noise and phase_jitter must be nonnegative"
            raise ConfigError(msg)
        regimes = self.resolved_regimes()
        if len(regimes) != self.class_count:
            msg = f"{len(regimes)} regimes given for {self.class_count} classes"
            raise ConfigError(msg)
        if len(set(regimes)) != len(regimes):
            msg = "every class needs its own regime"
            raise ConfigError(msg)

    def resolved_regimes(self) -> tuple[Regime, ...]:
        if self.regimes:
            return self.regimes
        return tuple(
            Regime(slope=0.02 * k, amplitude=1.0, frequency=0.3 + 0.15 * k)
            for k in range(self.class_count)
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SyntheticSpec:
        values = dict(data)
        regimes = tuple(Regime(**r) for r in values.pop("regimes", ()))
        try:
            return cls(**values, regimes=regimes)
        except TypeError as e:
            msg = f"invalid synthetic spec: {e}"
            raise ConfigError(msg) from e


def generate_synthetic(spec: SyntheticSpec) -> list[RawRun]:
    """One run per class, holding ``samples_per_class`` back-to-back sequences.

    Window the result with ``window = step = spec.length`` to get one sample per
    sequence.
    """
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    channel_shift = np.arange(spec.channels) * np.pi / 4
    runs = []
    for cls, regime in enumerate(spec.resolved_regimes()):
        phase = rng.uniform(
            -spec.phase_jitter, spec.phase_jitter, size=(spec.samples_per_class, 1, 1)
        )
        angle = regime.frequency * t[None, :, None] + phase + channel_shift[None, None, :]
        clean = regime.slope * t[None, :, None] + regime.amplitude * np.sin(angle)
        noise = rng.normal(0.0, spec.noise, size=clean.shape) if spec.noise else 0.0
        values = (clean + noise).reshape(-1, spec.channels)
        labels = np.full(len(values), cls, dtype=np.int64)
        runs.append(RawRun(values, labels, f"synthetic:{cls}", {f"class_{cls}": cls}))
    return runs


def synthetic_dataset(spec: SyntheticSpec) -> WindowedDataset:
    return windows_from_runs(generate_synthetic(spec), spec.length, spec.length)


def nearest_centroid_accuracy(ds: WindowedDataset, *, seed: int = 0) -> float:
    """Held-out accuracy of a nearest-centroid classifier on flattened windows."""
    features = ds.gather(np.arange(len(ds))).reshape(len(ds), -1)
    train_x, test_x, train_y, test_y = train_test_split(
        features, ds.labels, test_size=0.5, random_state=seed, stratify=ds.labels
    )
    model = NearestCentroid().fit(train_x, train_y)
    return float(np.mean(model.predict(test_x) == test_y))


# Standardization


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-score; ``fitted_on`` is the fingerprint of the fitting split."""

    mean: NDArray
    std: NDArray
    fitted_on: str

    def transform(self, batch: NDArray) -> NDArray:
        return (batch - self.mean) / self.std

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Standardizer:
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            std=np.asarray(data["std"], dtype=np.float64),
            fitted_on=str(data["fitted_on"]),
        )


def fit_standardizer(ds: WindowedDataset) -> Standardizer:
    """Mean and standard deviation over every raw row covered by a window."""
    total = np.zeros(ds.feature_count)
    squares = np.zeros(ds.feature_count)
    rows = 0
    for number, source in enumerate(ds.sources):
        covered = np.zeros(len(source), dtype=bool)
        for start in ds.starts[ds.source_index == number]:
            covered[start : start + ds.window] = True
        picked = source[covered]
        total += picked.sum(axis=0)
        squares += (picked * picked).sum(axis=0)
        rows += len(picked)
    if rows == 0:
        msg = "cannot fit a standardizer on an empty dataset"
        raise ContractError(msg)
    mean = total / rows
    std = np.sqrt(np.maximum(squares / rows - mean * mean, 0.0))
    std[std == 0] = 1.0
    return Standardizer(mean=mean, std=std, fitted_on=ds.fingerprint)


def standardize(
    ds: WindowedDataset, standardizer: Standardizer, *, train: WindowedDataset
) -> WindowedDataset:
    """Attach ``standardizer`` after checking it was fitted on ``train``."""
    if standardizer.fitted_on != train.fingerprint:
        msg = (
            f"standardizer was fitted on {standardizer.fitted_on}, "
            f"not on the training split {train.fingerprint}"
        )
        raise ContractError(msg)
    return ds.with_standardizer(standardizer)


# Splitting


def split_dataset(
    ds: WindowedDataset, test_fraction: float, *, seed: int = 0
) -> tuple[WindowedDataset, WindowedDataset]:
    """Stratified hold-out split keeping each class's proportion in both parts."""
    if not 0.0 < test_fraction < 1.0:
        msg = f"test fraction must lie in (0, 1), got {test_fraction}"
        raise ConfigError(msg)
    indices = np.arange(len(ds))
    train_idx, test_idx = train_test_split(
        indices, test_size=test_fraction, random_state=seed, stratify=ds.labels
    )
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


# Container


def _header_array(header: Mapping[str, Any]) -> NDArray:
    return np.array(json.dumps(header, sort_keys=True))


def save_dataset(ds: WindowedDataset, path: str | Path) -> Path:
    """Write a dataset, including its standardizer, to a single ``.npz`` file."""
    path = Path(path)
    header: dict[str, Any] = {
        "kind": "dataset",
        "format": CONTAINER_FORMAT,
        "window": ds.window,
        "step": ds.step,
        "feature_count": ds.feature_count,
        "source_count": len(ds.sources),
        "imbalance_set": sorted(ds.imbalance_set),
        "label_map": ds.label_map,
        "fingerprint": ds.fingerprint,
        "standardizer": None,
    }
    arrays: dict[str, ArrayLike] = {
        "source_index": ds.source_index,
        "starts": ds.starts,
        "labels": ds.labels,
    }
    for number, source in enumerate(ds.sources):
        arrays[f"source.{number}"] = source
    if ds.standardizer is not None:
        header["standardizer"] = {"fitted_on": ds.standardizer.fitted_on}
        arrays["standardizer.mean"] = ds.standardizer.mean
        arrays["standardizer.std"] = ds.standardizer.std
    with path.open("wb") as f:
        np.savez(f, header=_header_array(header), **arrays)
    logger.debug("Saved %d windows to %s", len(ds), path)
    return path


def load_dataset(path: str | Path) -> WindowedDataset:
    header, arrays = read_npz(path)
    if header.get("kind") != "dataset":
        msg = f"expected a dataset container, found {header.get('kind')!r}"
        raise ParseError(msg, path=str(path))
    standardizer = None
    if header["standardizer"] is not None:
        standardizer = Standardizer(
            mean=arrays["standardizer.mean"],
            std=arrays["standardizer.std"],
            fitted_on=header["standardizer"]["fitted_on"],
        )
    sources = []
    for number in range(header["source_count"]):
        source = arrays[f"source.{number}"]
        source.flags.writeable = False
        sources.append(source)
    return WindowedDataset(
        sources=tuple(sources),
        source_index=arrays["source_index"],
        starts=arrays["starts"],
        labels=arrays["labels"],
        window=header["window"],
        step=header["step"],
        imbalance_set=frozenset(header["imbalance_set"]),
        label_map=dict(header["label_map"]),
        standardizer=standardizer,
    )
