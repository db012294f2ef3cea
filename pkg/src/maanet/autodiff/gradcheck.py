"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from maanet.autodiff.tensor import Tensor, backward
from maanet.errors import ContractError, OracleError


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float
    per_input: list = field(default_factory=list)  # max error per input tensor
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _eval(closure, inputs) -> float:
    out = closure(*inputs)
    if out.data.size != 1:
        raise ContractError(f"closure must return a scalar, got dims {list(out.shape)}")
    return float(out.data.reshape(-1)[0])


def grad_check(closure: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
               tolerance: float = 1e-3, oracle_dtype=np.float64, max_elements: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients of ``closure(*inputs)`` with central differences.

    The autodiff side runs at the inputs' own precision. Finite differences are
    evaluated with the inputs temporarily promoted to ``oracle_dtype`` so the
    oracle's own rounding does not dominate a float32 comparison.

    Relative error per element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    ``max_elements`` caps how many entries per input are probed (random subset).
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ContractError(f"grad_check input {t!r} does not require grad")
        t.zero_grad()

    loss = closure(*inputs)
    if loss.data.size != 1:
        raise ContractError(f"closure must return a scalar, got dims {list(loss.shape)}")
    if loss.requires_grad:
        backward(loss)
    analytic = [t.grad.astype(np.float64).copy() for t in inputs]
    for t in inputs:
        t.zero_grad()
        t._touched = False

    originals = [t.data for t in inputs]
    rng = np.random.default_rng(seed)
    per_input = []
    checked = 0
    try:
        for t in inputs:
            t.data = t.data.astype(oracle_dtype)
        if _eval(closure, inputs) != _eval(closure, inputs):
            raise OracleError("closure is not deterministic: two evaluations disagree")
        for t, g_ad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            worst = 0.0
            for k in idx:
                orig = flat[k]
                flat[k] = orig + step
                f_plus = _eval(closure, inputs)
                flat[k] = orig - step
                f_minus = _eval(closure, inputs)
                flat[k] = orig
                g_fd = (f_plus - f_minus) / (2 * step)
                a = g_ad.reshape(-1)[k]
                err = abs(a - g_fd) / max(abs(a), abs(g_fd), 1e-8)
                worst = max(worst, err)
                checked += 1
            per_input.append(worst)
    finally:
        for t, d in zip(inputs, originals):
            t.data = d
    return GradCheckReport(tolerance=tolerance, max_rel_error=max(per_input, default=0.0),
                           per_input=per_input, checked=checked)
