"""Metric-learning objectives and the combined classification loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from quadfault.autodiff import (
    Tensor,
    add,
    add_scalar,
    euclidean_distance,
    hinge,
    mean,
    mul,
    scale,
    softmax_cross_entropy,
    squared_distance,
    sub,
)
from quadfault.exceptions import ConfigError, ContractError, DimensionError


if TYPE_CHECKING:
    from numpy.typing import ArrayLike


__all__ = [
    "QuadrupletLoss",
    "QuadrupletLossConfig",
    "combined_loss",
    "contrastive_loss",
    "quadruplet_loss",
    "softmax_cross_entropy",
    "triplet_loss",
]


@dataclass(frozen=True)
class QuadrupletLossConfig:
    """Margins, term weights and the mixing factor of the combined loss.

    Attributes:
        margin: Desired distance from anchors to negatives (M)
        margin2: Desired distance from anchors to minor samples (M2)
        lambda_pos: Weight of the positive term for balanced anchors
        lambda_minor: Weight of the minor term
        beta: Weight of the quadruplet term in the combined loss
        enforce_constraints: Require ``margin2 > margin`` and both weights above 1
    """

    margin: float = 20.0
    margin2: float = 50.0
    lambda_pos: float = 50.0
    lambda_minor: float = 20.0
    beta: float = 5e-4
    enforce_constraints: bool = True

    def __post_init__(self) -> None:
        for name in ("margin", "margin2", "lambda_pos", "lambda_minor", "beta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                msg = f"{name} must be a nonnegative number, got {value}"
                raise ConfigError(msg)
        if not self.enforce_constraints:
            return
        if self.margin2 <= self.margin:
            msg = f"margin2 ({self.margin2}) must exceed margin ({self.margin})"
            raise ConfigError(msg)
        if self.lambda_pos <= 1 or self.lambda_minor <= 1:
            msg = (
                "lambda_pos and lambda_minor must both exceed 1, got "
                f"{self.lambda_pos} and {self.lambda_minor}"
            )
            raise ConfigError(msg)

    @classmethod
    def cwru_defaults(cls) -> QuadrupletLossConfig:
        return cls(
            margin=5.0, margin2=10.0, lambda_pos=10.0, lambda_minor=10.0, beta=1e-3
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class QuadrupletLoss:
    """Batch-mean quadruplet loss with its three term means."""

    total: Tensor
    pos: Tensor
    neg: Tensor
    minor: Tensor

    def breakdown(self) -> dict[str, float]:
        return {
            "pos": self.pos.item(),
            "neg": self.neg.item(),
            "minor": self.minor.item(),
            "quadruplet": self.total.item(),
        }


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        msg = f"embedding shapes differ: {a.shape} vs {b.shape}"
        raise DimensionError(msg)


def contrastive_loss(
    e1: Tensor,
    e2: Tensor,
    same_class: bool | ArrayLike,
    margin: float,
) -> Tensor:
    """``Y·D + (1−Y)·max(0, margin − D)`` with ``D = ‖e1 − e2‖``, averaged."""
    _check_pair(e1, e2)
    distance = euclidean_distance(e1, e2)
    same = np.broadcast_to(np.asarray(same_class, dtype=np.float64), distance.shape)
    pull = mul(Tensor(same), distance)
    push = mul(Tensor(1.0 - same), hinge(add_scalar(scale(distance, -1.0), margin)))
    return mean(add(pull, push))


def triplet_loss(
    anchor: Tensor, positive: Tensor, negative: Tensor, margin: float
) -> Tensor:
    """``max(0, ‖a−p‖² − ‖a−n‖² + margin)``, averaged over the batch."""
    _check_pair(anchor, positive)
    _check_pair(anchor, negative)
    gap = sub(squared_distance(anchor, positive), squared_distance(anchor, negative))
    return mean(hinge(add_scalar(gap, margin)))


def quadruplet_loss(
    anchor: Tensor,
    positive: Tensor,
    negative: Tensor,
    minor: Tensor,
    gamma: int | ArrayLike,
    cfg: QuadrupletLossConfig,
) -> QuadrupletLoss:
    """Quadruplet loss over one tuple or a batch of tuples.

    Per tuple, ``L_pos = (1−γ)·D_pos + λ_pos·γ·D_pos``,
    ``L_neg = max(0, M − D_neg)`` and ``L_minor = λ_minor·max(0, M2 − D_minor)``.
    The tuple loss is their sum divided by three and the batch loss is the mean
    over tuples. Distances are unsquared Euclidean.

    Args:
        anchor: ``[d]`` or ``[N×d]`` embeddings
        positive: Same shape as ``anchor``
        negative: Same shape as ``anchor``
        minor: Same shape as ``anchor``
        gamma: 1 for anchors of balanced classes, 0 otherwise; one per tuple
        cfg: Margins and weights

    Returns:
        Total loss and the batch means of each term
    """
    for other in (positive, negative, minor):
        _check_pair(anchor, other)
    d_pos = euclidean_distance(anchor, positive)
    d_neg = euclidean_distance(anchor, negative)
    d_minor = euclidean_distance(anchor, minor)
    g = np.asarray(gamma, dtype=np.float64)
    if not np.all((g == 0) | (g == 1)):
        msg = f"gamma must be 0 or 1, got {np.unique(g).tolist()}"
        raise ContractError(msg)
    g = np.broadcast_to(g, d_pos.shape)
    pos_weight = Tensor((1.0 - g) + cfg.lambda_pos * g)
    l_pos = mul(pos_weight, d_pos)
    l_neg = hinge(add_scalar(scale(d_neg, -1.0), cfg.margin))
    minor_gap = hinge(add_scalar(scale(d_minor, -1.0), cfg.margin2))
    l_minor = scale(minor_gap, cfg.lambda_minor)
    per_tuple = scale(add(add(l_pos, l_neg), l_minor), 1.0 / 3.0)
    return QuadrupletLoss(
        total=mean(per_tuple), pos=mean(l_pos), neg=mean(l_neg), minor=mean(l_minor)
    )


def combined_loss(softmax_term: Tensor, metric_term: Tensor, beta: float) -> Tensor:
    """``L_softmax + β·L_metric``; with ``β = 0`` the result is the softmax term."""
    if softmax_term.ndim != 0 or metric_term.ndim != 0:
        msg = (
            f"combined loss needs scalar terms, got {softmax_term.shape} "
            f"and {metric_term.shape}"
        )
        raise ContractError(msg)
    if beta == 0:
        return softmax_term
    return add(softmax_term, scale(metric_term, beta))
