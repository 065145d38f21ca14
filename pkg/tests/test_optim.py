"""Tests for the optimizers."""

from __future__ import annotations

import numpy as np
import pytest

from quadfault.autodiff import Tensor
from quadfault.config import OptimizerConfig
from quadfault.exceptions import ContractError
from quadfault.optim import Adam, Sgd, build_optimizer


def _params(value: float = 1.0) -> dict[str, Tensor]:
    return {"w": Tensor([value, -value], requires_grad=True)}


def test_sgd_step() -> None:
    """Test that SGD moves against the gradient by lr times its size."""
    params = _params()
    Sgd(0.1).step(params, {"w": np.array([0.5, -2.0])})

    np.testing.assert_allclose(params["w"].data, [0.95, -0.8])


def test_adam_first_steps_by_hand() -> None:
    """Test two bias-corrected Adam steps against hand-computed values."""
    params = _params()
    adam = Adam(0.1)
    grads = {"w": np.array([0.5, 0.5])}

    adam.step(params, grads)
    np.testing.assert_allclose(params["w"].data, [0.9, -1.1], atol=1e-7)
    adam.step(params, grads)
    np.testing.assert_allclose(params["w"].data, [0.8, -1.2], atol=1e-7)
    assert adam.t == 2


def test_zero_learning_rate_leaves_parameters() -> None:
    """Test that a zero learning rate changes nothing."""
    params = _params()
    adam = Adam(0.0)
    adam.step(params, {"w": np.array([3.0, -1.0])})

    np.testing.assert_array_equal(params["w"].data, [1.0, -1.0])


def test_step_keeps_tensor_identity() -> None:
    """Test that updates replace values in place of the same tensor object."""
    params = _params()
    tensor = params["w"]
    Adam(0.1).step(params, {"w": np.ones(2)})

    assert params["w"] is tensor


def test_missing_gradient() -> None:
    """Test that a parameter without a gradient is refused."""
    with pytest.raises(ContractError):
        Adam().step(_params(), {})


def test_state_round_trip_continues_identically() -> None:
    """Test that a restored optimizer takes the same next step."""
    grads = {"w": np.array([0.3, -0.7])}
    a_params, b_params = _params(), _params()
    a = Adam(0.05)
    a.step(a_params, grads)
    b_params["w"].assign(a_params["w"].data)

    b = Adam(0.05)
    b.load_state_dict(a.state_dict())
    a.step(a_params, grads)
    b.step(b_params, grads)

    np.testing.assert_array_equal(a_params["w"].data, b_params["w"].data)


def test_build_optimizer() -> None:
    """Test that the configured kind and moments are used."""
    adam = build_optimizer(OptimizerConfig(beta1=0.8), 0.01)
    sgd = build_optimizer(OptimizerConfig(kind="sgd"), 0.5)

    assert isinstance(adam, Adam)
    assert adam.beta1 == 0.8
    assert isinstance(sgd, Sgd)
    assert sgd.learning_rate == 0.5
