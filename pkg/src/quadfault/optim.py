"""Gradient-descent optimizers over named parameter tensors."""

from __future__ import annotations

from typing import TYPE_CHECKING, Protocol

import numpy as np

from quadfault.exceptions import ConfigError, ContractError


if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray

    from quadfault.autodiff import Tensor
    from quadfault.config import OptimizerConfig


class Optimizer(Protocol):
    learning_rate: float

    def step(
        self, params: Mapping[str, Tensor], grads: Mapping[str, NDArray]
    ) -> None: ...

    def state_dict(self) -> dict[str, NDArray]: ...

    def load_state_dict(self, state: Mapping[str, NDArray]) -> None: ...


def _check_grads(params: Mapping[str, Tensor], grads: Mapping[str, NDArray]) -> None:
    missing = sorted(set(params) - set(grads))
    if missing:
        msg = f"no gradient for parameters {missing}"
        raise ContractError(msg)


class Sgd:
    """Plain stochastic gradient descent: ``p ← p − lr·g``."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, NDArray]) -> None:
        _check_grads(params, grads)
        for name, tensor in params.items():
            tensor.assign(tensor.data - self.learning_rate * grads[name])

    def state_dict(self) -> dict[str, NDArray]:
        return {}

    def load_state_dict(self, state: Mapping[str, NDArray]) -> None:
        pass


class Adam:
    """Adam with bias-corrected first and second moment estimates.

    ``p ← p − lr·m_hat / (√v_hat + eps)`` with bias-corrected moments
    ``m_hat = m/(1−β1ᵗ)`` and ``v_hat = v/(1−β2ᵗ)``.
    """

    def __init__(
        self,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, NDArray] = {}
        self.v: dict[str, NDArray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, NDArray]) -> None:
        _check_grads(params, grads)
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, tensor in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(tensor.data))
            v = self.v.get(name, np.zeros_like(tensor.data))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / correction1
            v_hat = v / correction2
            tensor.assign(
                tensor.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            )

    def state_dict(self) -> dict[str, NDArray]:
        state = {"t": np.asarray(self.t, dtype=np.int64)}
        for name in self.m:
            state[f"m.{name}"] = self.m[name].copy()
            state[f"v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Mapping[str, NDArray]) -> None:
        self.t = int(state["t"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


def build_optimizer(cfg: OptimizerConfig, learning_rate: float) -> Optimizer:
    match cfg.kind:
        case "adam":
            return Adam(learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        case "sgd":
            return Sgd(learning_rate)
        case _:
            msg = f"unknown optimizer {cfg.kind!r}"
            raise ConfigError(msg)
