"""Minimal reverse-mode autodiff: the operators CHIP layers and losses need, nothing more."""

from . import checkpoint, functional, nn
from .functional import DimensionError
from .optim import SGD, Adam, NonFiniteGradient, sgd_step
from .tensor import GraphError, Tensor, no_grad, precision, tensor

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "precision",
    "GraphError",
    "DimensionError",
    "SGD",
    "Adam",
    "sgd_step",
    "NonFiniteGradient",
    "functional",
    "nn",
    "checkpoint",
]
