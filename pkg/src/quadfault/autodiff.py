"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record themselves on the active `Tape` when at least one input requires
gradients. Outside a tape, every operation evaluates eagerly and returns constants,
which is how inference and finite-difference checks run.
"""

from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from quadfault.exceptions import ContractError, DimensionError, TapeError


if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence
    from contextvars import Token

    from numpy.typing import ArrayLike, NDArray

    Array = NDArray[np.float64]
    BackwardFn = Callable[[Array], tuple[Array | None, ...]]


_active_tape: ContextVar[Tape | None] = ContextVar("quadfault_tape", default=None)


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Tensor:
    """Immutable n-dimensional float64 array that can take part in a tape."""

    __slots__ = ("__weakref__", "_node", "data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        array = np.array(data, dtype=np.float64)
        if 0 in array.shape:
            msg = f"tensor dimensions must be positive, got shape {array.shape}"
            raise ContractError(msg)
        self.data: Array = _readonly(array)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Array | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray, *, requires_grad: bool = False) -> Tensor:
        out = cls.__new__(cls)
        out.data = _readonly(np.asarray(array, dtype=np.float64))
        out.requires_grad = requires_grad
        out.name = None
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.size != 1:
            msg = f"item() needs a single-element tensor, got shape {self.shape}"
            raise ContractError(msg)
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def assign(self, values: ArrayLike) -> None:
        """Replace the values of a leaf parameter, keeping its identity."""
        array = np.array(values, dtype=np.float64)
        if array.shape != self.shape:
            msg = f"cannot assign shape {array.shape} to tensor of shape {self.shape}"
            raise DimensionError(msg)
        self.data = _readonly(array)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


@dataclass(slots=True)
class Node:
    """One recorded operation."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tape: Tape
    index: int


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations evaluated inside the block are recorded.
    A tape can be differentiated once. Calling `backward` a second time raises
    `TapeError` until `reset` is called.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._tokens: list[Token[Tape | None]] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward: BackwardFn,
    ) -> None:
        if self.consumed:
            msg = "tape was already differentiated; call reset() before recording"
            raise TapeError(msg)
        node = Node(op, inputs, output, backward, self, len(self.nodes))
        output._node = node
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()
        self.consumed = False

    def backward(
        self,
        loss: Tensor,
        params: Iterable[Tensor] | None = None,
    ) -> dict[Tensor, Array]:
        """Propagate d(loss)/d(x) to every leaf that requires gradients.

        Args:
            loss: Scalar tensor recorded on this tape
            params: Tensors to report gradients for; unreachable ones get zeros.
                    Defaults to every leaf reached from the loss.

        Returns:
            Mapping from tensor to its gradient array. The gradient is also stored
            on each tensor's ``grad`` attribute.
        """
        if loss.ndim != 0:
            msg = f"backward needs a scalar loss, got shape {loss.shape}"
            raise ContractError(msg)
        if self.consumed:
            msg = "tape was already differentiated; call reset() first"
            raise TapeError(msg)
        if loss._node is not None and loss._node.tape is not self:
            msg = "loss was recorded on a different tape"
            raise TapeError(msg)

        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        stop = loss._node.index + 1 if loss._node is not None else 0
        for node in reversed(self.nodes[:stop]):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for inp, grad in zip(node.inputs, node.backward(upstream), strict=True):
                if grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                previous = grads.get(key)
                grads[key] = grad if previous is None else previous + grad
                if inp._node is None:
                    leaves[key] = inp
        self.consumed = True

        targets = list(params) if params is not None else list(leaves.values())
        result: dict[Tensor, Array] = {}
        for tensor in targets:
            grad = grads.get(id(tensor)) if id(tensor) in leaves else None
            tensor.grad = (
                np.zeros_like(tensor.data) if grad is None else np.asarray(grad)
            )
            result[tensor] = tensor.grad
        return result


def backward(
    loss: Tensor, params: Iterable[Tensor] | None = None
) -> dict[Tensor, Array]:
    """Differentiate ``loss`` on the tape it was recorded on.

    A loss that does not depend on any recorded operation is a constant: every
    requested parameter receives a zero gradient.
    """
    if loss.ndim != 0:
        msg = f"backward needs a scalar loss, got shape {loss.shape}"
        raise ContractError(msg)
    if loss._node is None:
        result: dict[Tensor, Array] = {}
        for tensor in params or ():
            grad = np.ones_like(tensor.data) if tensor is loss else None
            tensor.grad = np.zeros_like(tensor.data) if grad is None else grad
            result[tensor] = tensor.grad
        return result
    return loss._node.tape.backward(loss, params)


def _apply(
    op: str,
    inputs: tuple[Tensor, ...],
    value: np.ndarray,
    backward_fn: BackwardFn,
) -> Tensor:
    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, requires_grad=track)
    if track:
        assert tape is not None
        tape.record(op, inputs, out, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        msg = f"{op}: shape mismatch {a.shape} vs {b.shape}"
        raise DimensionError(msg)


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix-matrix ``[m×k]·[k×n]`` or matrix-vector ``[m×k]·[k]`` product."""
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:  # noqa: PLR2004
        msg = f"matmul: cannot multiply {a.shape} by {b.shape}"
        raise DimensionError(msg)
    av, bv = a.data, b.data

    def _backward(g: Array) -> tuple[Array, Array]:
        grad_a = np.outer(g, bv) if bv.ndim == 1 else g @ bv.T
        return grad_a, av.T @ g

    return _apply("matmul", (a, b), av @ bv, _backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:  # noqa: PLR2004
        msg = f"transpose needs a matrix, got shape {a.shape}"
        raise DimensionError(msg)
    return _apply("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _apply("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _apply("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _apply("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _apply("scale", (a,), a.data * factor, lambda g: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _apply("add_scalar", (a,), a.data + float(value), lambda g: (g,))


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, evaluated without overflow for any input."""
    xv = x.data
    positive = xv >= 0
    safe = np.where(positive, -xv, xv)
    exp = np.exp(safe)
    y = np.where(positive, 1.0 / (1.0 + exp), exp / (1.0 + exp))
    return _apply("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _apply("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    """``max(0, x)``; the subgradient at 0 is 0."""
    xv = x.data
    active = xv > 0
    return _apply("relu", (x,), np.where(active, xv, 0.0), lambda g: (g * active,))


def hinge(x: Tensor) -> Tensor:
    """Hinge ``max(0, x)``, identical to `relu`."""
    return relu(x)


# Reductions and distances


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _apply(
        "sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape),)
    )


def mean(a: Tensor) -> Tensor:
    shape, count = a.shape, a.size
    return _apply(
        "mean",
        (a,),
        np.asarray(a.data.sum() / count),
        lambda g: (np.broadcast_to(g / count, shape),),
    )


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of a vector, or row-wise norms of a matrix.

    The gradient at the origin is defined as zero.
    """
    av = a.data
    norm = np.sqrt(np.sum(av * av, axis=-1))

    def _backward(g: Array) -> tuple[Array]:
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(
                norm[..., None] > 0, av / np.expand_dims(norm, -1), 0.0
            )
        return (np.expand_dims(g, -1) * unit,)

    return _apply("l2_norm", (a,), norm, _backward)


def squared_norm(a: Tensor) -> Tensor:
    """Squared Euclidean norm of a vector, or row-wise for a matrix."""
    av = a.data
    return _apply(
        "squared_norm",
        (a,),
        np.sum(av * av, axis=-1),
        lambda g: (2.0 * np.expand_dims(g, -1) * av,),
    )


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """``‖a−b‖₂``; for matrices, one distance per row.

    At ``a == b`` the gradient is the zero vector.
    """
    _same_shape("euclidean_distance", a, b)
    return l2_norm(sub(a, b))


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("squared_distance", a, b)
    return squared_norm(sub(a, b))


def softmax(logits: ArrayLike) -> Array:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, target: int | Sequence[int] | np.ndarray
) -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``.

    Args:
        logits: ``[C]`` for one sample or ``[N×C]`` for a batch
        target: Class index, or one index per row
    """
    z = logits.data
    labels = np.asarray(target, dtype=np.int64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
        labels = labels.reshape(1)
    if z.ndim != 2 or labels.shape != (z.shape[0],):  # noqa: PLR2004
        msg = f"softmax_cross_entropy: logits {logits.shape} vs targets {labels.shape}"
        raise DimensionError(msg)
    class_count = z.shape[1]
    if labels.min() < 0 or labels.max() >= class_count:
        msg = f"target class out of range for {class_count} classes: {labels.tolist()}"
        raise ContractError(msg)
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[rows, labels]
    count = z.shape[0]

    def _backward(g: Array) -> tuple[Array]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        grad = probs * (g / count)
        return (grad[0] if single else grad,)

    value = np.asarray(losses.mean())
    return _apply("softmax_cross_entropy", (logits,), value, _backward)


# Shape manipulation


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    value = a.data.reshape(shape)
    return _apply("reshape", (a,), value, lambda g: (g.reshape(original),))


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a matrix; the gradient is zero elsewhere."""
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[0]:  # noqa: PLR2004
        msg = f"take_rows: invalid range {start}:{stop} for shape {a.shape}"
        raise DimensionError(msg)
    shape = a.shape

    def _backward(g: Array) -> tuple[Array]:
        grad = np.zeros(shape)
        grad[start:stop] = g
        return (grad,)

    return _apply("take_rows", (a,), a.data[start:stop].copy(), _backward)


# Checking


def numerical_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    *,
    h: float = 1e-5,
) -> Array:
    """Central finite-difference estimate of d(fn())/d(tensor)."""
    original = tensor.data
    grad = np.zeros_like(original)
    try:
        for index in np.ndindex(original.shape):
            bumped = original.copy()
            bumped[index] += h
            tensor.data = _readonly(bumped)
            upper = fn().item()
            bumped = original.copy()
            bumped[index] -= h
            tensor.data = _readonly(bumped)
            lower = fn().item()
            grad[index] = (upper - lower) / (2.0 * h)
    finally:
        tensor.data = original
    return grad


def relative_error(
    analytic: ArrayLike, numeric: ArrayLike, *, floor: float = 1e-6
) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale_ = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale_)) if a.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    h: float = 1e-5,
) -> dict[str, Any]:
    """Compare tape gradients with finite differences for every parameter.

    Returns:
        Mapping with the worst relative error and the per-parameter errors
    """
    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, params)
    errors = {
        (p.name or str(i)): relative_error(analytic[p], numerical_gradient(fn, p, h=h))
        for i, p in enumerate(params)
    }
    return {"max_error": max(errors.values(), default=0.0), "errors": errors}
