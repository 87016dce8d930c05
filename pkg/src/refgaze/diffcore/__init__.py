"""Dense-tensor numerical core: reverse-mode autodiff, neural building
blocks, parameter storage, and the finite-difference gradient oracle."""
from . import autodiff, nn
from .autodiff import (
    Node,
    backward,
    constant,
    forward,
    scalar,
    set_finite_checks,
)
from .gradcheck import grad_check
from .params import ParamStore

__all__ = [
    "Node",
    "ParamStore",
    "autodiff",
    "backward",
    "constant",
    "forward",
    "grad_check",
    "nn",
    "scalar",
    "set_finite_checks",
]
