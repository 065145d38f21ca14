"""Tests for the metric-learning losses."""

from __future__ import annotations

import numpy as np
import pytest

from quadfault.autodiff import Tape, Tensor, check_gradients
from quadfault.exceptions import ConfigError, ContractError, DimensionError
from quadfault.losses import (
    QuadrupletLoss,
    QuadrupletLossConfig,
    combined_loss,
    contrastive_loss,
    quadruplet_loss,
    triplet_loss,
)


# Distances from the anchor: positive 5, negative 10, minor 30.
ANCHOR = [0.0, 0.0]
POSITIVE = [3.0, 4.0]
NEGATIVE = [6.0, 8.0]
MINOR = [0.0, 30.0]


def _quad(gamma: int | list[int], rows: int | None = None) -> QuadrupletLoss:
    def t(v: list[float]) -> Tensor:
        return Tensor(v if rows is None else [v] * rows)

    return quadruplet_loss(
        t(ANCHOR), t(POSITIVE), t(NEGATIVE), t(MINOR), gamma, QuadrupletLossConfig()
    )


def test_default_constants() -> None:
    """Test the default margins and weights."""
    cfg = QuadrupletLossConfig()

    assert (cfg.margin, cfg.margin2) == (20.0, 50.0)
    assert (cfg.lambda_pos, cfg.lambda_minor) == (50.0, 20.0)
    assert cfg.beta == 5e-4


def test_balanced_anchor_value() -> None:
    """Test the loss of one tuple whose anchor class is balanced."""
    loss = _quad(1)

    assert loss.pos.item() == pytest.approx(250.0, abs=1e-12)
    assert loss.neg.item() == pytest.approx(10.0, abs=1e-12)
    assert loss.minor.item() == pytest.approx(400.0, abs=1e-12)
    assert loss.total.item() == pytest.approx(220.0, abs=1e-12)


def test_imbalanced_anchor_value() -> None:
    """Test that an imbalanced anchor keeps the positive term unweighted."""
    loss = _quad(0)

    assert loss.pos.item() == pytest.approx(5.0, abs=1e-12)
    assert loss.total.item() == pytest.approx(415.0 / 3.0, abs=1e-12)


def test_batch_is_mean_over_tuples() -> None:
    """Test that a batch loss averages the per-tuple losses."""
    loss = _quad([1, 0], rows=2)

    assert loss.total.item() == pytest.approx((220.0 + 415.0 / 3.0) / 2, abs=1e-12)
    assert loss.breakdown()["pos"] == pytest.approx(127.5, abs=1e-12)


def test_hinges_vanish_beyond_margins() -> None:
    """Test that far negatives and minors contribute nothing."""
    cfg = QuadrupletLossConfig(margin=1.0, margin2=2.0, lambda_pos=2.0, lambda_minor=2.0)
    a = Tensor([0.0, 0.0])
    loss = quadruplet_loss(a, a, Tensor([5.0, 0.0]), Tensor([0.0, 5.0]), 1, cfg)

    assert loss.total.item() == 0.0


def test_gamma_must_be_binary() -> None:
    """Test that gamma values other than 0 and 1 are refused."""
    with pytest.raises(ContractError):
        _quad(2)


def test_mismatched_embeddings() -> None:
    """Test that branch embeddings of different widths are refused."""
    with pytest.raises(DimensionError):
        quadruplet_loss(
            Tensor([0.0, 0.0]),
            Tensor([0.0]),
            Tensor([0.0, 0.0]),
            Tensor([0.0, 0.0]),
            1,
            QuadrupletLossConfig(),
        )


def test_gradients_match_finite_differences() -> None:
    """Test the quadruplet loss gradient away from hinge kinks."""
    rng = np.random.default_rng(0)
    anchor = Tensor(rng.uniform(size=(3, 4)), requires_grad=True)
    positive = Tensor(rng.uniform(size=(3, 4)), requires_grad=True)
    others = [Tensor(rng.uniform(size=(3, 4))) for _ in range(2)]
    cfg = QuadrupletLossConfig(margin=2.0, margin2=3.0, lambda_pos=4.0, lambda_minor=5.0)

    def loss() -> Tensor:
        return quadruplet_loss(anchor, positive, *others, [1, 0, 1], cfg).total

    assert check_gradients(loss, [anchor, positive])["max_error"] < 1e-4


@pytest.mark.parametrize(
    "changes",
    [
        {"margin": 20.0, "margin2": 20.0},
        {"lambda_pos": 1.0},
        {"lambda_minor": 0.5},
        {"beta": -1.0},
        {"margin": float("nan")},
    ],
)
def test_invalid_configurations(changes: dict[str, float]) -> None:
    """Test that broken margin and weight settings raise ConfigError."""
    with pytest.raises(ConfigError):
        QuadrupletLossConfig(**changes)


def test_constraints_can_be_relaxed() -> None:
    """Test that disabling the checks admits equal margins and unit weights."""
    cfg = QuadrupletLossConfig(
        margin2=20.0, lambda_pos=1.0, lambda_minor=1.0, enforce_constraints=False
    )

    assert cfg.margin2 == cfg.margin


def test_beta_zero_returns_softmax_term() -> None:
    """Test that a zero beta leaves the softmax term untouched."""
    soft = Tensor(1.25)
    metric = Tensor(1e6)

    assert combined_loss(soft, metric, 0.0) is soft
    assert combined_loss(soft, metric, 1e-3).item() == pytest.approx(1001.25)


def test_combined_loss_needs_scalars() -> None:
    """Test that vector terms are refused."""
    with pytest.raises(ContractError):
        combined_loss(Tensor([1.0, 2.0]), Tensor(0.0), 0.1)


def test_contrastive_loss() -> None:
    """Test that similar pairs pay their distance and dissimilar pairs the gap."""
    a = Tensor([[0.0, 0.0], [0.0, 0.0]])
    b = Tensor([[3.0, 4.0], [3.0, 4.0]])

    assert contrastive_loss(a, b, [1.0, 1.0], 8.0).item() == pytest.approx(5.0)
    assert contrastive_loss(a, b, [0.0, 0.0], 8.0).item() == pytest.approx(3.0)
    assert contrastive_loss(a, b, [1.0, 0.0], 8.0).item() == pytest.approx(4.0)


def test_triplet_loss() -> None:
    """Test the squared-distance triplet hinge."""
    a, p, n = Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), Tensor([2.0, 0.0])

    assert triplet_loss(a, p, n, 1.0).item() == 0.0
    assert triplet_loss(a, p, n, 5.0).item() == pytest.approx(2.0)


def test_loss_terms_are_recorded() -> None:
    """Test that the loss is differentiable with respect to the anchor."""
    a = Tensor([0.5, 0.5], requires_grad=True)
    cfg = QuadrupletLossConfig()
    with Tape() as tape:
        quad = quadruplet_loss(
            a, Tensor(POSITIVE), Tensor(NEGATIVE), Tensor(MINOR), 1, cfg
        )
    grads = tape.backward(quad.total, [a])

    assert np.all(np.isfinite(grads[a]))
    assert np.any(grads[a] != 0.0)
