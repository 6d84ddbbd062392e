"""Minimal dense tensors with reverse-mode autodiff and CNN layer primitives."""

from stsep.tensorcore import ops
from stsep.tensorcore.nn import BatchNorm2d, Conv2d, Linear, Module, Parameter
from stsep.tensorcore.tensor import Tensor, as_tensor, backward, finite_checks, is_grad_enabled, no_grad

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_checks",
    "is_grad_enabled",
    "no_grad",
    "ops",
]
