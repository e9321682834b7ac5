"""Reverse-mode autodiff, network layers and Adam for the flow models."""

from . import tape as ops
from .adam import AdamConfig, adam_step
from .layers import (
    LstmCellSpec,
    MlpSpec,
    glorot_bound,
    init_linear,
    init_lstm,
    init_mlp,
    init_params,
    linear,
    lstm_step,
    mlp_forward,
)
from .store import CHECKPOINT_VERSION, ParameterStore
from .tape import DomainError, Node, ShapeError, Tape

__all__ = [
    "AdamConfig",
    "CHECKPOINT_VERSION",
    "DomainError",
    "LstmCellSpec",
    "MlpSpec",
    "Node",
    "ParameterStore",
    "ShapeError",
    "Tape",
    "adam_step",
    "glorot_bound",
    "init_linear",
    "init_lstm",
    "init_mlp",
    "init_params",
    "linear",
    "lstm_step",
    "mlp_forward",
    "ops",
]
