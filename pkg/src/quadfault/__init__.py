"""Quadfault: main package.

LSTM fault diagnosis on imbalanced data with quadruplet deep metric learning.
"""

from __future__ import annotations

from importlib.metadata import version

__version__ = version("quadfault")
__title__ = "Quadfault"

__license__ = "MIT"

from quadfault.autodiff import Tape, Tensor, backward
from quadfault.config import ExperimentConfig, Method, TrainConfig, load_experiment
from quadfault.exceptions import QuadFaultError
from quadfault.losses import QuadrupletLossConfig, quadruplet_loss
from quadfault.metrics import EvalReport, aggregate, evaluate
from quadfault.networks import ModelParams, load_model, save_model
from quadfault.pairing import WindowedDataset, make_windows, sample_quadruplets
from quadfault.trainer import TrainResult, train


__all__ = [
    "EvalReport",
    "ExperimentConfig",
    "Method",
    "ModelParams",
    "QuadFaultError",
    "QuadrupletLossConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "WindowedDataset",
    "__version__",
    "aggregate",
    "backward",
    "evaluate",
    "load_experiment",
    "load_model",
    "make_windows",
    "quadruplet_loss",
    "sample_quadruplets",
    "save_model",
    "train",
]
