"""Minimal tensor and reverse-mode differentiation core for the energy network."""

from .autodiff import Tensor, grad, no_grad
from .network import (
    CheckpointError,
    LayerSpec,
    NetworkSpec,
    NumericError,
    ParamStore,
    RejectedInputError,
    build,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    vjp,
)
from .optim import NonFiniteGradientError, adam_step

__all__ = [
    "CheckpointError",
    "LayerSpec",
    "NetworkSpec",
    "NonFiniteGradientError",
    "NumericError",
    "ParamStore",
    "RejectedInputError",
    "Tensor",
    "adam_step",
    "build",
    "forward",
    "grad",
    "init_params",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "vjp",
]
