"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from maanet.autodiff.tensor import Tensor
from maanet.errors import ContractError


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: list[Tensor], state: SgdState) -> None:
    """One update: v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Every parameter must have been reached by a ``backward`` since the previous
    step. Gradients are zeroed afterwards.
    """
    stale = [p.name or f"#{i}" for i, p in enumerate(params) if p.grad is None or not p._touched]
    if stale:
        raise ContractError(f"no gradient for parameters: {', '.join(stale[:8])}")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ContractError("optimizer state does not match the parameter list")
    for p, v in zip(params, state.velocity):
        if v.shape != p.shape:
            raise ContractError(f"velocity dims {list(v.shape)} != parameter dims {list(p.shape)}")
        v *= state.momentum
        v += p.grad
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.learning_rate * v
        p.grad.fill(0)
        p._touched = False
