"""Tests for training, checkpoints and resampling."""

from __future__ import annotations

from dataclasses import replace
import json
from typing import TYPE_CHECKING

import numpy as np
import pytest

from quadfault.config import Method
from quadfault.exceptions import ConfigError, ContractError, TrainingDivergedError
from quadfault.metrics import evaluate
from quadfault.networks import ModelParams
from quadfault.optim import Adam
from quadfault.pairing import make_windows
from quadfault.trainer import (
    Batch,
    assemble_batch,
    oversample,
    spawn_rngs,
    train,
    train_step,
)


if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import NDArray

    from quadfault.config import TrainConfig
    from quadfault.pairing import WindowedDataset


def _assert_same_arrays(left: dict[str, NDArray], right: dict[str, NDArray]) -> None:
    assert left.keys() == right.keys()
    for name in left:
        np.testing.assert_array_equal(left[name], right[name], err_msg=name)


def _model(cfg: TrainConfig) -> ModelParams:
    return ModelParams.initialize(
        input_size=2,
        hidden_size=cfg.hidden_size,
        layer_count=cfg.layer_count,
        embed_dim=cfg.embed_dim,
        class_count=cfg.class_count,
        dropout_rate=cfg.dropout,
        rng=np.random.default_rng(0),
    )


def test_zero_beta_matches_plain_training(
    imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that LSTM-QDM with beta 0 follows the plain LSTM trajectory exactly."""
    cfg = replace(
        tiny_config,
        epochs=1,
        steps_per_epoch=10,
        loss=replace(tiny_config.loss, beta=0.0),
    )
    qdm = train(imbalanced_dataset, replace(cfg, method=Method.QDM))
    plain = train(imbalanced_dataset, replace(cfg, method=Method.PLAIN))

    _assert_same_arrays(qdm.model.snapshot(), plain.model.snapshot())
    assert [r.softmax for r in qdm.history] == [r.softmax for r in plain.history]
    assert all(r.metric is not None for r in qdm.history)


def test_metric_term_changes_trajectory(
    imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that a positive beta moves the parameters away from the plain run."""
    cfg = replace(tiny_config, epochs=1)
    qdm = train(imbalanced_dataset, cfg).model.snapshot()
    plain = train(imbalanced_dataset, replace(cfg, method=Method.PLAIN)).model.snapshot()

    assert any(not np.array_equal(qdm[k], v) for k, v in plain.items())


def test_training_is_deterministic(
    imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that equal seeds give identical models and different seeds do not."""
    a = train(imbalanced_dataset, tiny_config)
    b = train(imbalanced_dataset, tiny_config)
    c = train(imbalanced_dataset, replace(tiny_config, seed=4))

    _assert_same_arrays(a.model.snapshot(), b.model.snapshot())
    assert a.losses == b.losses
    assert a.losses != c.losses


@pytest.mark.parametrize("method", list(Method))
def test_every_method_trains(
    method: Method, imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that each method runs and records finite losses."""
    result = train(imbalanced_dataset, replace(tiny_config, method=method))

    assert result.epochs_run == 2
    assert len(result.history) == 6
    assert all(np.isfinite(r.total) for r in result.history)
    has_metric = method in (Method.QDM, Method.SIAMESE, Method.TRIPLET)
    assert (result.history[0].metric is not None) == has_metric
    assert result.model.metadata["method"] == method.value


def test_oversampling_balances_classes(imbalanced_dataset: WindowedDataset) -> None:
    """Test that oversampling duplicates minority windows up to the largest class."""
    balanced = oversample(imbalanced_dataset, np.random.default_rng(0))
    original = set(
        zip(
            imbalanced_dataset.source_index.tolist(),
            imbalanced_dataset.starts.tolist(),
            strict=True,
        )
    )
    resampled = set(
        zip(balanced.source_index.tolist(), balanced.starts.tolist(), strict=True)
    )

    assert balanced.class_counts() == {0: 20, 1: 20, 2: 20}
    assert resampled <= original
    assert not balanced.imbalance_set


def test_oversampling_without_imbalance_is_identity(
    small_dataset: WindowedDataset,
) -> None:
    """Test that a balanced dataset is returned unchanged."""
    assert oversample(small_dataset, np.random.default_rng(0)) is small_dataset


def test_oversample_method_trains_on_balanced_counts(
    imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that Oversample-LSTM reports the resampled class counts."""
    result = train(imbalanced_dataset, replace(tiny_config, method=Method.OVERSAMPLE))

    assert result.train_counts == {0: 20, 1: 20, 2: 20}


def test_quadruplet_batch_shapes(
    imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that a QDM batch carries four equally shaped branches and gamma."""
    batch = assemble_batch(imbalanced_dataset, tiny_config, spawn_rngs(0))

    assert batch.anchor.shape == (8, 6, 2)
    for branch in (batch.positive, batch.negative, batch.minor):
        assert branch is not None
        assert branch.shape == batch.anchor.shape
    assert batch.gamma is not None
    np.testing.assert_array_equal(batch.gamma, np.where(batch.labels == 2, 0, 1))


def test_diverged_step_leaves_parameters(
    imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that a NaN loss raises before the optimizer touches the weights."""
    model = _model(tiny_config)
    w = model.parameters()["classifier.w_fc"]
    w.assign(np.full(w.shape, np.nan))
    before = model.snapshot()
    rngs = spawn_rngs(0)
    batch = assemble_batch(imbalanced_dataset, tiny_config, rngs)

    with pytest.raises(TrainingDivergedError) as info:
        train_step(
            model,
            Adam(0.1),
            batch,
            tiny_config,
            dropout_rng=rngs["dropout"],
            branch_rng=rngs["branch_dropout"],
            step=7,
        )

    assert info.value.step == 7
    assert "softmax" in info.value.breakdown
    _assert_same_arrays(model.snapshot(), before)


def test_empty_batch_is_refused(tiny_config: TrainConfig) -> None:
    """Test that a step needs at least one sample."""
    batch = Batch(anchor=np.zeros((0, 6, 2)), labels=np.zeros(0, dtype=np.int64))
    rngs = spawn_rngs(0)

    with pytest.raises(ContractError):
        train_step(
            _model(tiny_config),
            Adam(),
            batch,
            tiny_config,
            dropout_rng=rngs["dropout"],
            branch_rng=rngs["branch_dropout"],
        )


def test_labels_beyond_class_count(
    small_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that a dataset with more classes than the model is refused."""
    with pytest.raises(ConfigError):
        train(small_dataset, replace(tiny_config, class_count=2, embed_dim=3))


def test_single_class_cannot_pair(tiny_config: TrainConfig) -> None:
    """Test that metric-learning methods need two classes."""
    ds = make_windows(np.zeros((40, 2)), np.zeros(40), 6, 6)

    with pytest.raises(ContractError):
        train(ds, tiny_config)


def test_checkpoint_resume_is_exact(
    tmp_path: Path, imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that resuming from a checkpoint reproduces the uninterrupted run."""
    cfg = replace(tiny_config, epochs=3)
    full = train(imbalanced_dataset, cfg, checkpoint_dir=tmp_path)

    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "epoch-0001.npz",
        "epoch-0002.npz",
        "epoch-0003.npz",
    ]
    resumed = train(imbalanced_dataset, cfg, resume=tmp_path / "epoch-0001.npz")

    _assert_same_arrays(full.model.snapshot(), resumed.model.snapshot())
    assert resumed.losses == full.losses
    assert resumed.epochs_run == 3


def test_resume_with_other_config(
    tmp_path: Path, imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that a checkpoint written for another configuration is refused."""
    train(imbalanced_dataset, replace(tiny_config, epochs=1), checkpoint_dir=tmp_path)

    with pytest.raises(ConfigError):
        train(
            imbalanced_dataset,
            replace(tiny_config, epochs=1, seed=99),
            resume=tmp_path / "epoch-0001.npz",
        )


def test_step_log(
    tmp_path: Path, imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that every step writes one JSON line with its loss terms."""
    log = tmp_path / "steps.jsonl"
    train(imbalanced_dataset, tiny_config, log_path=log)

    records = [json.loads(line) for line in log.read_text().splitlines()]

    assert [r["step"] for r in records] == list(range(6))
    assert {"softmax", "total", "metric", "pos", "neg", "minor"} <= records[0].keys()


def test_resumed_step_log_has_each_step_once(
    tmp_path: Path, imbalanced_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that resuming rewrites the steps logged after the checkpoint only once."""
    cfg = replace(tiny_config, epochs=3)
    log = tmp_path / "steps.jsonl"
    train(imbalanced_dataset, cfg, checkpoint_dir=tmp_path / "ckpt", log_path=log)
    full = log.read_text().splitlines()
    # interrupted during epoch 2, in the middle of writing a record
    log.write_text("\n".join(full[:5]) + '\n{"step": 5, "ep')

    train(
        imbalanced_dataset,
        cfg,
        resume=tmp_path / "ckpt" / "epoch-0001.npz",
        log_path=log,
    )
    resumed = log.read_text().splitlines()

    assert [json.loads(line)["step"] for line in resumed] == list(range(9))
    assert resumed == full


def test_early_stopping_restores_best(
    small_dataset: WindowedDataset, tiny_config: TrainConfig
) -> None:
    """Test that the returned model is the best one seen on validation data."""
    cfg = replace(tiny_config, epochs=4, patience=1)
    result = train(small_dataset, cfg, validation=small_dataset)

    assert result.best_epoch is not None
    assert result.best_score == evaluate(result.model, small_dataset).macro_f1
    assert result.epochs_run <= 4
