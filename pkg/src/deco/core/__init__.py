from .tensor import (
    Tensor,
    Parameter,
    ShapeError,
    backward,
    no_grad,
    grad_enabled,
    set_debug,
)
from .gradcheck import grad_check
from . import ops

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "backward",
    "no_grad",
    "grad_enabled",
    "set_debug",
    "grad_check",
    "ops",
]
