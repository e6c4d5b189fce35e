"""DECO: an end-to-end convolutional set-prediction object detector."""

from .core import Tensor, Parameter, no_grad, set_debug, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "no_grad", "set_debug", "grad_check", "__version__"]
