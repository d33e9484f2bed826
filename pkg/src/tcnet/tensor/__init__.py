"""Minimal dense tensors with reverse-mode differentiation."""
from . import ops
from .core import GraphConsumedError, Tensor, as_tensor, backward, custom_op, zero_grad
from .dft import dft_magnitude, full_spectrum, rdft
from .gradcheck import grad_check, param_grad_check
from .ops import OP_KINDS, tensor_op

__all__ = [
    "GraphConsumedError",
    "OP_KINDS",
    "Tensor",
    "as_tensor",
    "backward",
    "custom_op",
    "dft_magnitude",
    "full_spectrum",
    "grad_check",
    "param_grad_check",
    "ops",
    "rdft",
    "tensor_op",
    "zero_grad",
]
