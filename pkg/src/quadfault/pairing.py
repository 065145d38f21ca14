"""Sliding-window datasets and metric-learning tuple samplers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
import hashlib
from typing import TYPE_CHECKING, Literal

from imblearn.under_sampling import RandomUnderSampler
import numpy as np

from quadfault.autodiff import Tensor
from quadfault.exceptions import ContractError, SamplingError
from quadfault.log import get_logger


if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray

    from quadfault.dataio import Standardizer


logger = get_logger("pairing")

AnchorMode = Literal["sample", "class"]
MinorRule = Literal["literal", "prose"]

INDEX_DTYPE = np.int64


def _readonly(array: NDArray) -> NDArray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Fixed-length windows over one or more raw recordings.

    Windows are stored as offsets into the raw sources; `window_at` returns a view.
    Labels are contiguous class ids. ``label_map`` records which original label
    (fault number, file label, ...) each class id came from.
    """

    sources: tuple[NDArray, ...]
    source_index: NDArray
    starts: NDArray
    labels: NDArray
    window: int
    step: int
    imbalance_set: frozenset[int] = frozenset()
    label_map: dict[str, int] = field(default_factory=dict)
    standardizer: Standardizer | None = None

    def __post_init__(self) -> None:
        count = len(self.labels)
        if len(self.starts) != count or len(self.source_index) != count:
            msg = "starts, source_index and labels must have one entry per window"
            raise ContractError(msg)
        if self.window < 1 or self.step < 1:
            msg = f"window and step must be positive, got {self.window}, {self.step}"
            raise ContractError(msg)
        widths = {src.shape[1] for src in self.sources}
        if len(widths) > 1:
            msg = f"all sources must have the same feature count, got {sorted(widths)}"
            raise ContractError(msg)
        if not self.imbalance_set:
            return
        present = set(self.present_classes)
        if not self.imbalance_set <= present:
            missing = sorted(self.imbalance_set - present)
            msg = f"imbalanced classes {missing} have no samples"
            raise ContractError(msg)
        if self.imbalance_set == present:
            msg = "at least one class must stay outside the imbalance set"
            raise ContractError(msg)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_count(self) -> int:
        return self.sources[0].shape[1]

    @cached_property
    def present_classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))

    @cached_property
    def class_index(self) -> dict[int, NDArray]:
        """Sorted sample indices per class; the values partition ``range(len(self))``."""
        return {
            c: _readonly(np.flatnonzero(self.labels == c)) for c in self.present_classes
        }

    def class_counts(self) -> dict[int, int]:
        return {c: len(idx) for c, idx in self.class_index.items()}

    def row_range(self, index: int) -> tuple[int, int, int]:
        """Source number and raw row range ``[start, stop)`` covered by a window."""
        start = int(self.starts[index])
        return int(self.source_index[index]), start, start + self.window

    def window_at(self, index: int) -> NDArray:
        """Raw ``[W×m]`` view of one window (no standardization)."""
        source, start, stop = self.row_range(index)
        return self.sources[source][start:stop]

    def gather(self, indices: ArrayLike) -> NDArray:
        """Stack the given windows into a ``[B×W×m]`` array, standardized if fitted."""
        picked = np.asarray(indices, dtype=INDEX_DTYPE).reshape(-1)
        if picked.size == 0:
            return np.zeros((0, self.window, self.feature_count))
        batch = np.stack([self.window_at(int(i)) for i in picked])
        if self.standardizer is not None:
            batch = self.standardizer.transform(batch)
        return batch

    @property
    def samples(self) -> list[Tensor]:
        return [Tensor(self.gather([i])[0]) for i in range(len(self))]

    def subset(self, indices: ArrayLike) -> WindowedDataset:
        """Dataset restricted to ``indices``, sharing the raw sources."""
        picked = np.asarray(indices, dtype=INDEX_DTYPE).reshape(-1)
        labels = self.labels[picked]
        present = set(np.unique(labels).tolist())
        return replace(
            self,
            source_index=_readonly(self.source_index[picked].copy()),
            starts=_readonly(self.starts[picked].copy()),
            labels=_readonly(labels.copy()),
            imbalance_set=frozenset(self.imbalance_set & present),
        )

    def with_standardizer(self, standardizer: Standardizer | None) -> WindowedDataset:
        return replace(self, standardizer=standardizer)

    def with_imbalance(self, classes: Iterable[int]) -> WindowedDataset:
        return replace(self, imbalance_set=frozenset(int(c) for c in classes))

    @classmethod
    def concat(cls, parts: Sequence[WindowedDataset]) -> WindowedDataset:
        """Join datasets built with the same window parameters."""
        if not parts:
            msg = "cannot concatenate zero datasets"
            raise ContractError(msg)
        first = parts[0]
        for part in parts[1:]:
            if (part.window, part.step) != (first.window, first.step):
                msg = (
                    f"window parameters differ: ({part.window}, {part.step}) vs "
                    f"({first.window}, {first.step})"
                )
                raise ContractError(msg)
        sources: list[NDArray] = []
        source_index, starts, labels = [], [], []
        label_map: dict[str, int] = {}
        imbalance: set[int] = set()
        for part in parts:
            source_index.append(part.source_index + len(sources))
            sources.extend(part.sources)
            starts.append(part.starts)
            labels.append(part.labels)
            label_map.update(part.label_map)
            imbalance |= part.imbalance_set
        return cls(
            sources=tuple(sources),
            source_index=_readonly(np.concatenate(source_index)),
            starts=_readonly(np.concatenate(starts)),
            labels=_readonly(np.concatenate(labels)),
            window=first.window,
            step=first.step,
            imbalance_set=frozenset(imbalance),
            label_map=label_map,
            standardizer=first.standardizer,
        )

    @cached_property
    def fingerprint(self) -> str:
        """Short content hash over raw data, window layout and labels."""
        digest = hashlib.sha256()
        digest.update(f"{self.window}:{self.step}".encode())
        for source in self.sources:
            digest.update(np.ascontiguousarray(source).tobytes())
        for array in (self.source_index, self.starts, self.labels):
            digest.update(np.ascontiguousarray(array, dtype=INDEX_DTYPE).tobytes())
        return digest.hexdigest()[:16]


def make_windows(
    raw: ArrayLike,
    raw_labels: ArrayLike,
    window: int,
    step: int,
    *,
    copy: bool = False,
    imbalance_set: Iterable[int] = (),
    label_map: Mapping[str, int] | None = None,
) -> WindowedDataset:
    """Cut a recording into windows of ``window`` rows every ``step`` rows.

    Window ``k`` covers rows ``[k·step, k·step + window)`` (0-based) and takes the
    label of its last row.

    Args:
        raw: ``[n×m]`` matrix, or a 1-D signal treated as one channel
        raw_labels: One class id per row
        window: Window length W
        step: Stride s between window starts
        copy: Give every window its own buffer instead of a view into ``raw``
        imbalance_set: Classes declared as imbalanced
        label_map: Original label for each class id
    """
    data = np.array(raw, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    labels = np.asarray(raw_labels, dtype=INDEX_DTYPE).reshape(-1)
    if data.ndim != 2:  # noqa: PLR2004
        msg = f"raw data must be a matrix, got shape {data.shape}"
        raise ContractError(msg)
    if len(labels) != data.shape[0]:
        msg = f"{data.shape[0]} rows but {len(labels)} labels"
        raise ContractError(msg)
    if step <= 0:
        msg = f"step must be positive, got {step}"
        raise ContractError(msg)
    if window <= 0:
        msg = f"window must be positive, got {window}"
        raise ContractError(msg)
    rows = data.shape[0]
    if rows < window:
        msg = f"recording has {rows} rows, shorter than the window of {window}"
        raise ContractError(msg)
    starts = np.arange(0, rows - window + 1, step, dtype=INDEX_DTYPE)
    window_labels = labels[starts + window - 1]
    if copy:
        sources = tuple(_readonly(data[s : s + window].copy()) for s in starts)
        source_index = np.arange(len(starts), dtype=INDEX_DTYPE)
        offsets = np.zeros(len(starts), dtype=INDEX_DTYPE)
    else:
        sources = (_readonly(data),)
        source_index = np.zeros(len(starts), dtype=INDEX_DTYPE)
        offsets = starts
    return WindowedDataset(
        sources=sources,
        source_index=_readonly(source_index),
        starts=_readonly(offsets),
        labels=_readonly(window_labels.copy()),
        window=window,
        step=step,
        imbalance_set=frozenset(int(c) for c in imbalance_set),
        label_map=dict(label_map or {}),
    )


@dataclass(frozen=True)
class QuadrupletBatch:
    """Sample indices of (anchor, positive, negative, minor) tuples."""

    anchor: NDArray
    positive: NDArray
    negative: NDArray
    minor: NDArray
    gamma: NDArray

    def __len__(self) -> int:
        return len(self.anchor)

    @property
    def tuples(self) -> list[tuple[int, int, int, int]]:
        return [
            (int(a), int(p), int(n), int(m))
            for a, p, n, m in zip(
                self.anchor, self.positive, self.negative, self.minor, strict=True
            )
        ]


@dataclass(frozen=True)
class TripletBatch:
    anchor: NDArray
    positive: NDArray
    negative: NDArray

    def __len__(self) -> int:
        return len(self.anchor)


def sample_anchors(
    ds: WindowedDataset,
    batch_size: int,
    rng: np.random.Generator,
    *,
    mode: AnchorMode = "sample",
) -> NDArray:
    """Draw anchor indices uniformly over samples, or over classes then samples."""
    if batch_size < 1:
        msg = f"batch size must be positive, got {batch_size}"
        raise ContractError(msg)
    if len(ds) == 0:
        msg = "cannot sample anchors from an empty dataset"
        raise ContractError(msg)
    if mode == "sample":
        return rng.integers(0, len(ds), size=batch_size, dtype=INDEX_DTYPE)
    if mode == "class":
        classes = ds.present_classes
        picks = rng.integers(0, len(classes), size=batch_size)
        return np.array(
            [_pick(ds.class_index[classes[k]], rng) for k in picks], dtype=INDEX_DTYPE
        )
    msg = f"unknown anchor mode {mode!r}"
    raise ContractError(msg)


def _pick(members: NDArray, rng: np.random.Generator) -> int:
    return int(members[rng.integers(0, len(members))])


def _pick_positive(members: NDArray, anchor: int, rng: np.random.Generator) -> int:
    if len(members) == 1:
        return anchor
    slot = int(rng.integers(0, len(members) - 1))
    own = int(np.searchsorted(members, anchor))
    return int(members[slot if slot < own else slot + 1])


def negative_classes(ds: WindowedDataset, anchor_class: int) -> tuple[int, ...]:
    return tuple(
        c
        for c in ds.present_classes
        if c != anchor_class and c not in ds.imbalance_set
    )


def minor_classes(
    ds: WindowedDataset,
    anchor_class: int,
    *,
    rule: MinorRule = "literal",
) -> tuple[int, ...]:
    """Classes the minor sample may come from for an anchor of ``anchor_class``.

    With one imbalanced class, any class other than the anchor's qualifies
    (``rule="prose"`` narrows this to the imbalanced class for balanced anchors).
    With several, the imbalanced classes other than the anchor's qualify; if none
    remain the single-class rule applies.
    """
    others = tuple(c for c in ds.present_classes if c != anchor_class)
    imbalance = ds.imbalance_set
    if len(imbalance) == 1:
        if rule == "prose" and anchor_class not in imbalance:
            return tuple(imbalance)
        return others
    candidates = tuple(c for c in sorted(imbalance) if c != anchor_class)
    return candidates or others


def sample_quadruplets(
    ds: WindowedDataset,
    batch_size: int,
    rng: np.random.Generator,
    *,
    anchors: ArrayLike | None = None,
    anchor_mode: AnchorMode = "sample",
    minor_rule: MinorRule = "literal",
) -> QuadrupletBatch:
    """Draw a batch of quadruplets.

    Args:
        ds: Dataset with at least two classes
        batch_size: Number of tuples (ignored when ``anchors`` is given)
        rng: Generator for partner draws (and anchors if not given)
        anchors: Pre-drawn anchor indices
        anchor_mode: How anchors are drawn when not given
        minor_rule: Variant of the minor-class rule

    Raises:
        SamplingError: No negative class exists for some anchor's class
    """
    if len(ds.present_classes) < 2:  # noqa: PLR2004
        msg = f"need at least two classes, dataset has {list(ds.present_classes)}"
        raise SamplingError(msg)
    if anchors is None:
        anchors = sample_anchors(ds, batch_size, rng, mode=anchor_mode)
    anchor_idx = np.asarray(anchors, dtype=INDEX_DTYPE).reshape(-1)
    negatives_for: dict[int, tuple[int, ...]] = {}
    minors_for: dict[int, tuple[int, ...]] = {}
    count = len(anchor_idx)
    positive = np.empty(count, dtype=INDEX_DTYPE)
    negative = np.empty(count, dtype=INDEX_DTYPE)
    minor = np.empty(count, dtype=INDEX_DTYPE)
    gamma = np.empty(count, dtype=INDEX_DTYPE)
    for slot, anchor in enumerate(anchor_idx):
        cls = int(ds.labels[anchor])
        if cls not in negatives_for:
            negatives_for[cls] = negative_classes(ds, cls)
            minors_for[cls] = minor_classes(ds, cls, rule=minor_rule)
        neg_classes = negatives_for[cls]
        if not neg_classes:
            msg = f"no balanced negative class available for anchor class {cls}"
            raise SamplingError(msg)
        positive[slot] = _pick_positive(ds.class_index[cls], int(anchor), rng)
        neg_cls = neg_classes[int(rng.integers(0, len(neg_classes)))]
        negative[slot] = _pick(ds.class_index[neg_cls], rng)
        minor_choices = minors_for[cls]
        minor_cls = minor_choices[int(rng.integers(0, len(minor_choices)))]
        minor[slot] = _pick(ds.class_index[minor_cls], rng)
        gamma[slot] = 0 if cls in ds.imbalance_set else 1
    return QuadrupletBatch(anchor_idx, positive, negative, minor, gamma)


def sample_triplets(
    ds: WindowedDataset,
    batch_size: int,
    rng: np.random.Generator,
    *,
    anchors: ArrayLike | None = None,
    anchor_mode: AnchorMode = "sample",
) -> TripletBatch:
    """Anchor, same-class positive and a negative from any other class."""
    if len(ds.present_classes) < 2:  # noqa: PLR2004
        msg = f"need at least two classes, dataset has {list(ds.present_classes)}"
        raise SamplingError(msg)
    if anchors is None:
        anchors = sample_anchors(ds, batch_size, rng, mode=anchor_mode)
    anchor_idx = np.asarray(anchors, dtype=INDEX_DTYPE).reshape(-1)
    positive = np.empty(len(anchor_idx), dtype=INDEX_DTYPE)
    negative = np.empty(len(anchor_idx), dtype=INDEX_DTYPE)
    for slot, anchor in enumerate(anchor_idx):
        cls = int(ds.labels[anchor])
        others = [c for c in ds.present_classes if c != cls]
        positive[slot] = _pick_positive(ds.class_index[cls], int(anchor), rng)
        neg_cls = others[int(rng.integers(0, len(others)))]
        negative[slot] = _pick(ds.class_index[neg_cls], rng)
    return TripletBatch(anchor_idx, positive, negative)


def _seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def resolve_targets(
    counts: Mapping[int, int], ratios: Mapping[int, float | int]
) -> dict[int, int]:
    """Turn keep fractions (floats) and absolute counts (ints) into target counts."""
    targets: dict[int, int] = {}
    for cls, value in ratios.items():
        if cls not in counts:
            msg = f"class {cls} is not present in the dataset"
            raise ContractError(msg)
        available = counts[cls]
        if isinstance(value, float):
            if not 0.0 < value <= 1.0:
                msg = f"keep fraction for class {cls} must lie in (0, 1], got {value}"
                raise ContractError(msg)
            target = max(1, round(available * value))
        else:
            target = int(value)
        if target < 1:
            msg = f"class {cls} needs a positive target count, got {target}"
            raise ContractError(msg)
        if target > available:
            msg = f"class {cls} has {available} samples, cannot keep {target}"
            raise ContractError(msg)
        targets[int(cls)] = target
    return targets


def apply_imbalance(
    ds: WindowedDataset,
    ratios: Mapping[int, float | int],
    rng: np.random.Generator,
) -> WindowedDataset:
    """Subsample classes without replacement to build an imbalanced training set.

    Args:
        ds: Source dataset
        ratios: Per class, a keep fraction (float) or a target count (int)
        rng: Generator seeding the under-sampler

    Returns:
        The subsampled dataset; its imbalance set holds the classes that shrank.
    """
    targets = resolve_targets(ds.class_counts(), ratios)
    counts = ds.class_counts()
    shrunk = {c for c, t in targets.items() if t < counts[c]}
    if not shrunk:
        return ds
    sampler = RandomUnderSampler(sampling_strategy=targets, random_state=_seed_from(rng))
    positions = np.arange(len(ds)).reshape(-1, 1)
    sampler.fit_resample(positions, ds.labels)
    kept = np.sort(sampler.sample_indices_)
    logger.debug(
        "Subsampled classes %s to %s", sorted(shrunk), {c: targets[c] for c in shrunk}
    )
    return ds.subset(kept).with_imbalance(shrunk)
