"""Offline training of the LSTM classifier and its metric-learning variants.

Every run draws from six independent random streams spawned from the seed, so the
anchor draws and anchor dropout masks of a quadruplet run coincide with those of a
plain softmax run. With ``beta = 0`` both runs therefore follow the same parameter
trajectory.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
from pathlib import Path
from typing import TYPE_CHECKING, Any

from imblearn.over_sampling import RandomOverSampler
import numpy as np

from quadfault.autodiff import Tape, add, scale, softmax_cross_entropy
from quadfault.config import Method, config_hash
from quadfault.exceptions import ConfigError, ContractError, TrainingDivergedError
from quadfault.log import get_logger
from quadfault.losses import (
    combined_loss,
    contrastive_loss,
    quadruplet_loss,
    triplet_loss,
)
from quadfault.metrics import evaluate
from quadfault.networks import (
    ModelParams,
    classify_logits,
    encode,
    encode_branches,
    forward_quadruplet,
    model_header,
    read_npz,
)
from quadfault.optim import build_optimizer
from quadfault.pairing import sample_anchors, sample_quadruplets, sample_triplets


if TYPE_CHECKING:
    from collections.abc import Mapping
    from typing import IO

    from numpy.typing import NDArray

    from quadfault.autodiff import Tensor
    from quadfault.config import TrainConfig
    from quadfault.optim import Optimizer
    from quadfault.pairing import WindowedDataset


logger = get_logger("trainer")

RNG_STREAMS = ("init", "resample", "anchor", "pairing", "dropout", "branch_dropout")
CHECKPOINT_FORMAT = 1


@dataclass
class StepRecord:
    """Losses of one optimizer step, as written to the training log."""

    step: int
    epoch: int
    softmax: float
    total: float
    metric: float | None = None
    pos: float | None = None
    neg: float | None = None
    minor: float | None = None

    @classmethod
    def from_terms(
        cls, step: int, epoch: int, terms: Mapping[str, float | None]
    ) -> StepRecord:
        return cls(
            step=step,
            epoch=epoch,
            softmax=float(terms["softmax"] or 0.0),
            total=float(terms["total"] or 0.0),
            metric=terms.get("metric"),
            pos=terms.get("pos"),
            neg=terms.get("neg"),
            minor=terms.get("minor"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Batch:
    """Windows of one training step; partner arrays depend on the method."""

    anchor: NDArray
    labels: NDArray
    positive: NDArray | None = None
    negative: NDArray | None = None
    minor: NDArray | None = None
    gamma: NDArray | None = None

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TrainResult:
    model: ModelParams
    history: list[StepRecord]
    epochs_run: int
    train_counts: dict[int, int]
    config_hash: str
    best_epoch: int | None = None
    best_score: float | None = None
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [r.total for r in self.history]


@dataclass
class TrainingState:
    """Everything needed to continue a run exactly where it stopped."""

    model: ModelParams
    optimizer: Optimizer
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    step: int = 0
    history: list[StepRecord] = field(default_factory=list)
    best_score: float | None = None
    best_epoch: int | None = None
    best_params: dict[str, NDArray] | None = None
    bad_epochs: int = 0


def spawn_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {
        name: np.random.default_rng(child)
        for name, child in zip(RNG_STREAMS, children, strict=True)
    }


def oversample(ds: WindowedDataset, rng: np.random.Generator) -> WindowedDataset:
    """Duplicate windows of imbalanced classes until each matches the largest class.

    Duplicates reference the original windows; the imbalance set is cleared.
    """
    counts = ds.class_counts()
    if not ds.imbalance_set or not counts:
        return ds
    target = max(counts.values())
    strategy = {c: target for c in ds.imbalance_set if counts[c] < target}
    if not strategy:
        return ds.with_imbalance(())
    sampler = RandomOverSampler(
        sampling_strategy=strategy, random_state=int(rng.integers(0, 2**31 - 1))
    )
    sampler.fit_resample(np.arange(len(ds)).reshape(-1, 1), ds.labels)
    indices = np.sort(sampler.sample_indices_)
    logger.debug("Oversampled classes %s to %d windows", sorted(strategy), target)
    return ds.subset(indices).with_imbalance(())


def assemble_batch(
    ds: WindowedDataset,
    cfg: TrainConfig,
    rngs: Mapping[str, np.random.Generator],
) -> Batch:
    """Draw anchors (and partners for metric-learning methods) for one step."""
    anchors = sample_anchors(ds, cfg.batch_size, rngs["anchor"], mode=cfg.anchor_mode)
    batch = Batch(anchor=ds.gather(anchors), labels=ds.labels[anchors].copy())
    if cfg.method is Method.QDM:
        tuples = sample_quadruplets(
            ds,
            cfg.batch_size,
            rngs["pairing"],
            anchors=anchors,
            minor_rule=cfg.minor_rule,
        )
        batch.positive = ds.gather(tuples.positive)
        batch.negative = ds.gather(tuples.negative)
        batch.minor = ds.gather(tuples.minor)
        batch.gamma = tuples.gamma
    elif cfg.method in (Method.SIAMESE, Method.TRIPLET):
        triplets = sample_triplets(ds, cfg.batch_size, rngs["pairing"], anchors=anchors)
        batch.positive = ds.gather(triplets.positive)
        batch.negative = ds.gather(triplets.negative)
    return batch


def _forward(
    model: ModelParams,
    batch: Batch,
    cfg: TrainConfig,
    *,
    dropout_rng: np.random.Generator,
    branch_rng: np.random.Generator,
) -> tuple[Tensor, dict[str, float | None]]:
    terms: dict[str, float | None] = {}
    if cfg.method is Method.QDM:
        assert batch.positive is not None
        assert batch.negative is not None
        assert batch.minor is not None
        out = forward_quadruplet(
            model,
            (batch.anchor, batch.positive, batch.negative, batch.minor),
            training=True,
            rng=dropout_rng,
            branch_rng=branch_rng,
        )
        soft = softmax_cross_entropy(out.logits, batch.labels)
        quad = quadruplet_loss(
            out.anchor, out.positive, out.negative, out.minor, batch.gamma, cfg.loss
        )
        terms.update(quad.breakdown())
        terms["metric"] = terms.pop("quadruplet")
        loss = combined_loss(soft, quad.total, cfg.loss.beta)
    elif cfg.method in (Method.SIAMESE, Method.TRIPLET):
        assert batch.positive is not None
        assert batch.negative is not None
        anchor = encode(model, batch.anchor, training=True, rng=dropout_rng)
        positive, negative = encode_branches(
            model, (batch.positive, batch.negative), training=True, rng=branch_rng
        )
        soft = softmax_cross_entropy(
            classify_logits(model.classifier, anchor), batch.labels
        )
        margin = cfg.loss.margin
        if cfg.method is Method.SIAMESE:
            pull = contrastive_loss(anchor, positive, 1.0, margin)
            push = contrastive_loss(anchor, negative, 0.0, margin)
            metric = scale(add(pull, push), 0.5)
        else:
            metric = triplet_loss(anchor, positive, negative, margin)
        terms["metric"] = metric.item()
        loss = combined_loss(soft, metric, cfg.loss.beta)
    else:
        anchor = encode(model, batch.anchor, training=True, rng=dropout_rng)
        soft = softmax_cross_entropy(
            classify_logits(model.classifier, anchor), batch.labels
        )
        loss = soft
    terms["softmax"] = soft.item()
    terms["total"] = loss.item()
    return loss, terms


def train_step(
    model: ModelParams,
    optimizer: Optimizer,
    batch: Batch,
    cfg: TrainConfig,
    *,
    dropout_rng: np.random.Generator,
    branch_rng: np.random.Generator,
    step: int = 0,
) -> dict[str, float | None]:
    """One forward pass, backward pass and optimizer update.

    Returns:
        The loss terms of the step

    Raises:
        TrainingDivergedError: A loss term is NaN or infinite; parameters are left
            untouched
    """
    if len(batch) == 0:
        msg = "cannot take a step on an empty batch"
        raise ContractError(msg)
    with Tape() as tape:
        loss, terms = _forward(
            model, batch, cfg, dropout_rng=dropout_rng, branch_rng=branch_rng
        )
    if not all(np.isfinite(v) for v in terms.values() if v is not None):
        breakdown = {k: v for k, v in terms.items() if v is not None}
        raise TrainingDivergedError(step, breakdown)
    params = model.parameters()
    grads = tape.backward(loss, params.values())
    optimizer.step(params, {name: grads[t] for name, t in params.items()})
    return terms


def _check_dataset(ds: WindowedDataset, cfg: TrainConfig) -> None:
    if len(ds) == 0:
        msg = "cannot train on an empty dataset"
        raise ContractError(msg)
    top = int(ds.labels.max())
    if top >= cfg.class_count:
        msg = f"dataset has class {top} but class_count is {cfg.class_count}"
        raise ConfigError(msg)
    if cfg.method in (Method.QDM, Method.SIAMESE, Method.TRIPLET) and (
        len(ds.present_classes) < 2  # noqa: PLR2004
    ):
        msg = f"{cfg.method.display_name} needs at least two classes"
        raise ContractError(msg)


def _new_state(
    ds: WindowedDataset, cfg: TrainConfig
) -> tuple[TrainingState, WindowedDataset]:
    rngs = spawn_rngs(cfg.seed)
    if cfg.method is Method.OVERSAMPLE:
        ds = oversample(ds, rngs["resample"])
    model = ModelParams.initialize(
        input_size=ds.feature_count,
        hidden_size=cfg.hidden_size,
        layer_count=cfg.layer_count,
        embed_dim=cfg.embed_dim,
        class_count=cfg.class_count,
        dropout_rate=cfg.dropout,
        rng=rngs["init"],
        squash_logits=cfg.literal_logit_sigmoid,
    )
    model.metadata = {"method": cfg.method.value, "label_map": ds.label_map}
    optimizer = build_optimizer(cfg.optimizer, cfg.learning_rate)
    return TrainingState(model=model, optimizer=optimizer, rngs=rngs), ds


def train(
    ds: WindowedDataset,
    cfg: TrainConfig,
    *,
    validation: WindowedDataset | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 1,
    resume: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train a model on ``ds`` with the method selected in ``cfg``.

    Args:
        ds: Training windows
        cfg: Training configuration
        validation: Windows for early stopping on macro-F1; the best parameters
                    are restored at the end
        checkpoint_dir: Directory for ``epoch-XXXX.npz`` checkpoints
        checkpoint_every: Checkpoint interval in epochs
        resume: Checkpoint to continue from
        log_path: JSON-lines file receiving one record per step

    Returns:
        The trained model and its loss history
    """
    _check_dataset(ds, cfg)
    digest = config_hash(cfg)
    state, ds = _new_state(ds, cfg)
    if resume is not None:
        restore_checkpoint(state, resume, expected_hash=digest)
        logger.info("Resuming from %s at epoch %d", resume, state.epoch)
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(ds) // cfg.batch_size)
    log_file = None
    if log_path is not None:
        log_file = _open_step_log(Path(log_path), state.step if resume else None)
    stopped_early = False
    try:
        while state.epoch < cfg.epochs:
            for _ in range(steps_per_epoch):
                batch = assemble_batch(ds, cfg, state.rngs)
                terms = train_step(
                    state.model,
                    state.optimizer,
                    batch,
                    cfg,
                    dropout_rng=state.rngs["dropout"],
                    branch_rng=state.rngs["branch_dropout"],
                    step=state.step,
                )
                record = StepRecord.from_terms(state.step, state.epoch, terms)
                state.history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record.to_dict()) + "\n")
                if cfg.log_every and state.step % cfg.log_every == 0:
                    logger.info(
                        "epoch %d step %d loss %.6f",
                        state.epoch,
                        state.step,
                        record.total,
                    )
                logger.debug("step %d terms %s", state.step, terms)
                state.step += 1
            state.epoch += 1
            if validation is not None:
                stopped_early = _early_stop(state, validation, cfg)
            if checkpoint_dir is not None and (
                state.epoch % checkpoint_every == 0 or state.epoch == cfg.epochs
            ):
                path = Path(checkpoint_dir) / f"epoch-{state.epoch:04d}.npz"
                save_checkpoint(state, path, config_hash=digest)
            if stopped_early:
                logger.info("Stopping early after epoch %d", state.epoch)
                break
    finally:
        if log_file is not None:
            log_file.close()
    if state.best_params is not None:
        state.model.restore(state.best_params)
    return TrainResult(
        model=state.model,
        history=state.history,
        epochs_run=state.epoch,
        train_counts=ds.class_counts(),
        config_hash=digest,
        best_epoch=state.best_epoch,
        best_score=state.best_score,
        stopped_early=stopped_early,
    )


def _open_step_log(path: Path, resume_step: int | None) -> IO[str]:
    """Open the step log, dropping records a resumed run is about to write again.

    Records at or after ``resume_step`` and any partially written line are removed.
    """
    if resume_step is None or not path.exists():
        return path.open("w", encoding="utf-8")
    kept: list[str] = []
    dropped = 0
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            step = json.loads(line)["step"]
        except (json.JSONDecodeError, KeyError, TypeError):
            step = None
        if isinstance(step, int) and step < resume_step:
            kept.append(line)
        elif line.strip():
            dropped += 1
    if dropped:
        logger.info("Dropping %d step log records from %s", dropped, path)
    path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")
    return path.open("a", encoding="utf-8")


def _early_stop(
    state: TrainingState, validation: WindowedDataset, cfg: TrainConfig
) -> bool:
    score = evaluate(state.model, validation).macro_f1
    logger.info("epoch %d validation macro-F1 %.4f", state.epoch, score)
    if state.best_score is None or score > state.best_score:
        state.best_score = score
        state.best_epoch = state.epoch
        state.best_params = state.model.snapshot()
        state.bad_epochs = 0
        return False
    state.bad_epochs += 1
    return state.bad_epochs >= cfg.patience


# Checkpoints


def save_checkpoint(state: TrainingState, path: str | Path, *, config_hash: str) -> Path:
    """Write model, optimizer, random streams and early-stop state to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "checkpoint",
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "model": model_header(state.model),
        "epoch": state.epoch,
        "step": state.step,
        "rng": {name: rng.bit_generator.state for name, rng in state.rngs.items()},
        "history": [r.to_dict() for r in state.history],
        "early_stop": {
            "best_score": state.best_score,
            "best_epoch": state.best_epoch,
            "bad_epochs": state.bad_epochs,
        },
    }
    arrays: dict[str, NDArray] = {
        f"param.{name}": t.data for name, t in state.model.parameters().items()
    }
    arrays.update({f"optim.{k}": v for k, v in state.optimizer.state_dict().items()})
    if state.best_params is not None:
        arrays.update({f"best.{k}": v for k, v in state.best_params.items()})
    with path.open("wb") as f:
        np.savez(f, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    logger.debug("Saved checkpoint %s", path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, NDArray]]:
    header, arrays = read_npz(path)
    if header.get("kind") != "checkpoint":
        msg = f"{path} is not a training checkpoint"
        raise ConfigError(msg)
    return header, arrays


def restore_checkpoint(
    state: TrainingState, path: str | Path, *, expected_hash: str | None = None
) -> None:
    """Overwrite ``state`` with the contents of a checkpoint."""
    header, arrays = load_checkpoint(path)
    if expected_hash is not None and header["config_hash"] != expected_hash:
        msg = (
            f"checkpoint {path} was written for config {header['config_hash']}, "
            f"not {expected_hash}"
        )
        raise ConfigError(msg)
    state.model.restore({
        k.removeprefix("param."): v for k, v in arrays.items() if k.startswith("param.")
    })
    state.optimizer.load_state_dict({
        k.removeprefix("optim."): v for k, v in arrays.items() if k.startswith("optim.")
    })
    for name, rng in state.rngs.items():
        rng.bit_generator.state = header["rng"][name]
    state.epoch = header["epoch"]
    state.step = header["step"]
    state.history = [StepRecord(**r) for r in header["history"]]
    early = header["early_stop"]
    state.best_score = early["best_score"]
    state.best_epoch = early["best_epoch"]
    state.bad_epochs = early["bad_epochs"]
    best = {
        k.removeprefix("best."): v for k, v in arrays.items() if k.startswith("best.")
    }
    state.best_params = best or None
