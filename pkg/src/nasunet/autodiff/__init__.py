"""Minimal reverse-mode autodiff over dense NCHW arrays."""
from . import functional, kernels
from .module import Module, kaiming_normal
from .tensor import (
    GraphError,
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "functional",
    "kernels",
    "Module",
    "kaiming_normal",
    "GraphError",
    "NumericError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "set_default_dtype",
]
