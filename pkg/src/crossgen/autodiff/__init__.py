from .tensor import NonFiniteError, Tensor, accumulate, backward, check_finite, is_grad_enabled, no_grad
from .optim import ParamStore, adam_step
from . import functional

__all__ = [
    "NonFiniteError",
    "ParamStore",
    "Tensor",
    "accumulate",
    "adam_step",
    "backward",
    "check_finite",
    "functional",
    "is_grad_enabled",
    "no_grad",
]
