"""Exception hierarchy for quadfault."""

from __future__ import annotations

from typing import TYPE_CHECKING


if TYPE_CHECKING:
    from collections.abc import Mapping


class QuadFaultError(Exception):
    """Base class for all errors raised by quadfault."""


class DimensionError(QuadFaultError, ValueError):
    """Tensor shapes do not fit together."""


class ContractError(QuadFaultError, ValueError):
    """A precondition of an operation was violated."""


class TapeError(QuadFaultError):
    """Misuse of the gradient tape."""


class SamplingError(QuadFaultError):
    """No valid partner sample can be drawn for an anchor."""


class ConfigError(QuadFaultError, ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(QuadFaultError):
    """Input file could not be parsed."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class MetricsError(QuadFaultError, ValueError):
    """Reports cannot be combined or computed."""


class TrainingDivergedError(QuadFaultError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, step: int, breakdown: Mapping[str, float]):
        terms = ", ".join(f"{k}={v!r}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.step = step
        self.breakdown = dict(breakdown)
