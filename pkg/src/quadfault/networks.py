"""LSTM feature extractor, embedding head and classifier head.

One `ModelParams` instance backs every branch of a quadruplet: the four inputs run
through the same tensors, so their gradients accumulate into a single parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np

from quadfault.autodiff import (
    Tensor,
    add,
    matmul,
    mul,
    reshape,
    sigmoid,
    take_rows,
    tanh,
    transpose,
)
from quadfault.exceptions import ContractError, DimensionError, ParseError
from quadfault.log import get_logger


if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray


logger = get_logger("networks")

CHECKPOINT_FORMAT = 1


def _uniform(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> NDArray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class LstmLayer:
    """Gate weights of one LSTM layer (no biases)."""

    w_fh: Tensor
    w_fx: Tensor
    w_rh: Tensor
    w_rx: Tensor
    w_oh: Tensor
    w_ox: Tensor
    w_ch: Tensor
    w_cx: Tensor

    WEIGHTS: ClassVar[tuple[str, ...]] = (
        "w_fh",
        "w_fx",
        "w_rh",
        "w_rx",
        "w_oh",
        "w_ox",
        "w_ch",
        "w_cx",
    )

    def __post_init__(self) -> None:
        hidden, inputs = self.hidden_size, self.input_size
        for name in self.WEIGHTS:
            expected = (hidden, hidden) if name.endswith("h") else (hidden, inputs)
            weight: Tensor = getattr(self, name)
            if weight.shape != expected:
                msg = f"{name} must have shape {expected}, got {weight.shape}"
                raise DimensionError(msg)
            if not np.all(np.isfinite(weight.data)):
                msg = f"{name} contains non-finite values"
                raise ContractError(msg)

    @property
    def hidden_size(self) -> int:
        return self.w_fh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_fx.shape[1]

    @classmethod
    def initialize(
        cls,
        input_size: int,
        hidden_size: int,
        rng: np.random.Generator,
    ) -> LstmLayer:
        weights = {}
        for name in cls.WEIGHTS:
            fan_in = hidden_size if name.endswith("h") else input_size
            weights[name] = Tensor(
                _uniform(rng, hidden_size, fan_in, fan_in), requires_grad=True
            )
        return cls(**weights)

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.WEIGHTS}


@dataclass
class LstmParams:
    """Stack of LSTM layers; layer k consumes the hidden states of layer k-1."""

    layers: list[LstmLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            msg = "an LSTM needs at least one layer"
            raise ContractError(msg)
        for index in range(1, len(self.layers)):
            previous, layer = self.layers[index - 1], self.layers[index]
            if layer.input_size != previous.hidden_size:
                msg = (
                    f"layer {index} input size {layer.input_size} does not match "
                    f"layer {index - 1} hidden size {previous.hidden_size}"
                )
                raise DimensionError(msg)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].hidden_size

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @classmethod
    def initialize(
        cls,
        input_size: int,
        hidden_size: int,
        layer_count: int,
        rng: np.random.Generator,
    ) -> LstmParams:
        layers = []
        for index in range(layer_count):
            fan = input_size if index == 0 else hidden_size
            layers.append(LstmLayer.initialize(fan, hidden_size, rng))
        return cls(layers)


@dataclass
class EmbeddingParams:
    """One fully-connected layer with sigmoid activation: ``p = σ(W_fe·h)``."""

    w_fe: Tensor

    @property
    def embed_dim(self) -> int:
        return self.w_fe.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_fe.shape[1]


@dataclass
class ClassifierParams:
    """Linear classifier ``a = W_fc·p``; ``squash`` applies σ to the logits."""

    w_fc: Tensor
    squash: bool = False

    def __post_init__(self) -> None:
        if self.class_count < 2:  # noqa: PLR2004
            msg = f"a classifier needs at least 2 classes, got {self.class_count}"
            raise ContractError(msg)

    @property
    def class_count(self) -> int:
        return self.w_fc.shape[0]


@dataclass
class ModelParams:
    lstm: LstmParams
    embed: EmbeddingParams
    classifier: ClassifierParams
    dropout_rate: float = 0.0
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            msg = f"dropout rate must lie in [0, 1), got {self.dropout_rate}"
            raise ContractError(msg)
        if self.embed.hidden_size != self.lstm.hidden_size:
            msg = (
                f"embedding expects {self.embed.hidden_size} features, "
                f"LSTM produces {self.lstm.hidden_size}"
            )
            raise DimensionError(msg)
        if self.embed.embed_dim >= self.lstm.hidden_size:
            msg = (
                f"embedding dimension {self.embed.embed_dim} must be smaller than "
                f"hidden size {self.lstm.hidden_size}"
            )
            raise ContractError(msg)
        if self.classifier.w_fc.shape[1] != self.embed.embed_dim:
            msg = (
                f"classifier expects {self.classifier.w_fc.shape[1]} inputs, "
                f"embedding produces {self.embed.embed_dim}"
            )
            raise DimensionError(msg)

    @classmethod
    def initialize(
        cls,
        *,
        input_size: int,
        hidden_size: int,
        layer_count: int,
        embed_dim: int,
        class_count: int,
        dropout_rate: float,
        rng: np.random.Generator,
        squash_logits: bool = False,
    ) -> ModelParams:
        """Draw every weight uniformly from ``±1/√fan_in``."""
        lstm = LstmParams.initialize(input_size, hidden_size, layer_count, rng)
        w_fe = Tensor(
            _uniform(rng, embed_dim, hidden_size, hidden_size), requires_grad=True
        )
        w_fc = Tensor(
            _uniform(rng, class_count, embed_dim, embed_dim), requires_grad=True
        )
        return cls(
            lstm=lstm,
            embed=EmbeddingParams(w_fe),
            classifier=ClassifierParams(w_fc, squash=squash_logits),
            dropout_rate=dropout_rate,
        )

    @property
    def class_count(self) -> int:
        return self.classifier.class_count

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors, keyed by a stable dotted name."""
        params: dict[str, Tensor] = {}
        for index, layer in enumerate(self.lstm.layers):
            for name, tensor in layer.tensors().items():
                params[f"lstm.{index}.{name}"] = tensor
        params["embed.w_fe"] = self.embed.w_fe
        params["classifier.w_fc"] = self.classifier.w_fc
        for name, tensor in params.items():
            tensor.name = name
        return params

    def snapshot(self) -> dict[str, NDArray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def restore(self, values: Mapping[str, ArrayLike]) -> None:
        for name, tensor in self.parameters().items():
            tensor.assign(values[name])


def dropout(
    x: Tensor,
    rate: float,
    *,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    """Inverted dropout: zero each unit with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        msg = f"dropout rate must lie in [0, 1), got {rate}"
        raise ContractError(msg)
    if not training or rate == 0.0:
        return x
    if rng is None:
        msg = "dropout in training mode needs a random generator"
        raise ContractError(msg)
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate)))


def _as_batch(sequence: Tensor | ArrayLike) -> tuple[NDArray, bool]:
    data = sequence.data if isinstance(sequence, Tensor) else np.asarray(sequence)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:  # noqa: PLR2004
        return data[None, ...], True
    if data.ndim == 3:  # noqa: PLR2004
        return data, False
    msg = f"expected a [T×m] sequence or [B×T×m] batch, got shape {data.shape}"
    raise DimensionError(msg)


def _run_layer(layer: LstmLayer, inputs: Sequence[Tensor]) -> list[Tensor]:
    batch = inputs[0].shape[0]
    w = {name: transpose(t) for name, t in layer.tensors().items()}
    h = Tensor(np.zeros((batch, layer.hidden_size)))
    c = Tensor(np.zeros((batch, layer.hidden_size)))
    states = []
    for x in inputs:
        f = sigmoid(add(matmul(h, w["w_fh"]), matmul(x, w["w_fx"])))
        r = sigmoid(add(matmul(h, w["w_rh"]), matmul(x, w["w_rx"])))
        o = sigmoid(add(matmul(h, w["w_oh"]), matmul(x, w["w_ox"])))
        c_hat = tanh(add(matmul(h, w["w_ch"]), matmul(x, w["w_cx"])))
        c = add(mul(f, c), mul(r, c_hat))
        h = mul(o, tanh(c))
        states.append(h)
    return states


def lstm_forward(
    params: LstmParams,
    sequence: Tensor | ArrayLike,
    *,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the LSTM stack and return the last hidden state of the top layer.

    Args:
        params: LSTM weights
        sequence: ``[T×m]`` sequence, or a ``[B×T×m]`` batch of sequences
        dropout_rate: Dropout probability between stacked layers
        training: Apply dropout
        rng: Generator for dropout masks

    Returns:
        ``[hidden]`` for a single sequence, ``[B×hidden]`` for a batch
    """
    batch, single = _as_batch(sequence)
    if batch.shape[1] < 1:
        msg = "cannot run an LSTM over an empty sequence"
        raise ContractError(msg)
    if batch.shape[2] != params.input_size:
        msg = f"sequence has {batch.shape[2]} features, LSTM expects {params.input_size}"
        raise DimensionError(msg)
    states = [Tensor._wrap(batch[:, t, :]) for t in range(batch.shape[1])]
    for index, layer in enumerate(params.layers):
        if index > 0:
            states = [
                dropout(s, dropout_rate, training=training, rng=rng) for s in states
            ]
        states = _run_layer(layer, states)
    last = states[-1]
    return reshape(last, (params.hidden_size,)) if single else last


def embed(params: EmbeddingParams, feature: Tensor) -> Tensor:
    """``σ(W_fe·feature)`` for a ``[hidden]`` vector or each row of ``[B×hidden]``."""
    if feature.shape[-1] != params.hidden_size:
        msg = f"feature of shape {feature.shape} does not fit W_fe {params.w_fe.shape}"
        raise DimensionError(msg)
    if feature.ndim == 1:
        return sigmoid(matmul(params.w_fe, feature))
    return sigmoid(matmul(feature, transpose(params.w_fe)))


def classify_logits(params: ClassifierParams, embedding: Tensor) -> Tensor:
    if embedding.shape[-1] != params.w_fc.shape[1]:
        msg = f"embedding {embedding.shape} does not fit W_fc {params.w_fc.shape}"
        raise DimensionError(msg)
    if embedding.ndim == 1:
        logits = matmul(params.w_fc, embedding)
    else:
        logits = matmul(embedding, transpose(params.w_fc))
    return sigmoid(logits) if params.squash else logits


def encode(
    model: ModelParams,
    sequences: Tensor | ArrayLike,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Embeddings for one sequence or a batch."""
    feature = lstm_forward(
        model.lstm,
        sequences,
        dropout_rate=model.dropout_rate,
        training=training,
        rng=rng,
    )
    return embed(model.embed, feature)


@dataclass
class QuadrupletOutput:
    anchor: Tensor
    positive: Tensor
    negative: Tensor
    minor: Tensor
    logits: Tensor


def encode_branches(
    model: ModelParams,
    branches: Sequence[ArrayLike],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> list[Tensor]:
    """Embed several equally-shaped batches in one pass through the shared weights."""
    arrays = [_as_batch(b) for b in branches]
    single = arrays[0][1]
    stacked = np.concatenate([a for a, _ in arrays], axis=0)
    embeddings = encode(model, stacked, training=training, rng=rng)
    rows = arrays[0][0].shape[0]
    parts = []
    for index in range(len(arrays)):
        part = take_rows(embeddings, index * rows, (index + 1) * rows)
        parts.append(reshape(part, (model.embed.embed_dim,)) if single else part)
    return parts


def forward_quadruplet(
    model: ModelParams,
    pair: Sequence[ArrayLike],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    branch_rng: np.random.Generator | None = None,
) -> QuadrupletOutput:
    """Embed (anchor, positive, negative, minor) with one shared parameter set.

    In training mode the anchor runs on its own with ``rng``, the other three with
    ``branch_rng``, so the anchor path consumes exactly the random draws a plain
    classifier would. Logits come from the anchor embedding only.
    """
    if len(pair) != 4:  # noqa: PLR2004
        msg = f"a quadruplet has four sequences, got {len(pair)}"
        raise ContractError(msg)
    shapes = {np.shape(s.data if isinstance(s, Tensor) else s) for s in pair}
    if len(shapes) != 1:
        msg = f"quadruplet sequences must share one shape, got {sorted(shapes)}"
        raise ContractError(msg)
    data = [s.data if isinstance(s, Tensor) else s for s in pair]
    if training:
        anchor = encode(model, data[0], training=True, rng=rng)
        positive, negative, minor = encode_branches(
            model, data[1:], training=True, rng=branch_rng or rng
        )
    else:
        anchor, positive, negative, minor = encode_branches(model, data)
    return QuadrupletOutput(
        anchor=anchor,
        positive=positive,
        negative=negative,
        minor=minor,
        logits=classify_logits(model.classifier, anchor),
    )


def predict(model: ModelParams, windows: ArrayLike, *, batch_size: int = 512) -> NDArray:
    """Arg-max class for each window of a ``[N×T×m]`` array (inference mode)."""
    data = np.asarray(windows, dtype=np.float64)
    predictions = []
    for start in range(0, data.shape[0], batch_size):
        embedding = encode(model, data[start : start + batch_size])
        logits = classify_logits(model.classifier, embedding)
        predictions.append(np.argmax(logits.data, axis=1))
    if not predictions:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(predictions).astype(np.int64)


# Persistence


def _header_array(header: Mapping[str, Any]) -> NDArray:
    return np.array(json.dumps(header, sort_keys=True))


def model_header(model: ModelParams) -> dict[str, Any]:
    return {
        "input_size": model.lstm.input_size,
        "hidden_size": model.lstm.hidden_size,
        "layer_count": model.lstm.layer_count,
        "embed_dim": model.embed.embed_dim,
        "class_count": model.class_count,
        "dropout_rate": model.dropout_rate,
        "squash_logits": model.classifier.squash,
        "shapes": {name: list(t.shape) for name, t in model.parameters().items()},
        "metadata": model.metadata,
    }


def model_from_arrays(
    header: Mapping[str, Any], arrays: Mapping[str, NDArray]
) -> ModelParams:
    layers = [
        LstmLayer(**{
            name: Tensor(arrays[f"lstm.{index}.{name}"], requires_grad=True)
            for name in LstmLayer.WEIGHTS
        })
        for index in range(header["layer_count"])
    ]
    return ModelParams(
        lstm=LstmParams(layers),
        embed=EmbeddingParams(Tensor(arrays["embed.w_fe"], requires_grad=True)),
        classifier=ClassifierParams(
            Tensor(arrays["classifier.w_fc"], requires_grad=True),
            squash=header["squash_logits"],
        ),
        dropout_rate=header["dropout_rate"],
        metadata=dict(header.get("metadata", {})),
    )


def save_model(model: ModelParams, path: str | Path, *, config_hash: str = "") -> Path:
    """Write a self-describing ``.npz`` file holding every weight buffer.

    Args:
        model: Model to persist
        path: Target file
        config_hash: Hash of the configuration that produced the model

    Returns:
        The written path
    """
    path = Path(path)
    header = {
        "kind": "model",
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "model": model_header(model),
    }
    arrays = {f"param.{name}": t.data for name, t in model.parameters().items()}
    with path.open("wb") as f:
        np.savez(f, header=_header_array(header), **arrays)
    logger.debug("Saved model to %s", path)
    return path


def read_npz(path: str | Path) -> tuple[dict[str, Any], dict[str, NDArray]]:
    """Read a quadfault ``.npz`` container into its header and arrays."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as payload:
            header = json.loads(str(payload["header"]))
            arrays = {key: payload[key] for key in payload.files if key != "header"}
    except (OSError, ValueError, KeyError) as e:
        msg = f"not a quadfault container: {e}"
        raise ParseError(msg, path=str(path)) from e
    return header, arrays


def load_model(path: str | Path) -> tuple[ModelParams, str]:
    """Read a model written by `save_model` (or a training checkpoint).

    Returns:
        Tuple of (model, config hash)
    """
    header, arrays = read_npz(path)
    params = {
        key.removeprefix("param."): value
        for key, value in arrays.items()
        if key.startswith("param.")
    }
    return model_from_arrays(header["model"], params), header.get("config_hash", "")
