"""Numpy-backed tensors with reverse-mode differentiation."""

from maanet.autodiff import functional
from maanet.autodiff.functional import apply
from maanet.autodiff.gradcheck import GradCheckReport, grad_check
from maanet.autodiff.optim import SgdState, sgd_step
from maanet.autodiff.tensor import (
    Graph,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Graph", "GradCheckReport", "SgdState", "Tensor", "apply", "backward", "default_dtype",
    "functional", "grad_check", "no_grad", "precision", "set_default_dtype", "sgd_step",
]
