"""Attribute BCE, auxiliary attention BCE, Dice spatial loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maanet.autodiff import Tensor
from maanet.autodiff import functional as F
from maanet.autodiff.tensor import as_tensor
from maanet.errors import ConfigError, ShapeError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    attr: float = 1.0
    attn: float = 0.5
    spatial: float = 0.5

    def __post_init__(self):
        if min(self.attr, self.attn, self.spatial) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")


@dataclass
class LossReport:
    l_attr: float = 0.0
    l_attn: float = 0.0
    l_spatial: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"l_attr": self.l_attr, "l_attn": self.l_attn, "l_spatial": self.l_spatial, "total": self.total}


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean over heads (the 1/C factor) and over the batch of the stable-logit BCE."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ShapeError("bce_loss", logits.shape, labels.shape)
    return F.mean(F.bce_with_logits(logits, labels))


def attr_loss(attr_logits: Tensor, labels) -> Tensor:
    return bce_loss(attr_logits, labels)


def attn_loss(attn_logits: Tensor, labels) -> Tensor:
    return bce_loss(attn_logits, labels)


def spatial_loss(pred_map: Tensor, mask, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss 1 - (2Σpg + eps)/(Σp + Σg + eps), averaged over the batch.

    pred_map: N×h×w in [0, 1] (on the tape); mask: N×h×w in [0, 1].
    """
    g = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    g = g.astype(pred_map.dtype, copy=False)
    if g.shape != pred_map.shape:
        raise ShapeError("spatial_loss", pred_map.shape, g.shape)
    if pred_map.ndim == 2:
        pred_map = F.reshape(pred_map, (1,) + pred_map.shape)
        g = g[None]
    axes = (1, 2)
    inter = F.sum(F.mul(pred_map, g), axis=axes)
    denom = F.add(F.sum(pred_map, axis=axes), g.sum(axis=axes) + eps)
    dice = F.div(F.add(F.mul(inter, 2.0), eps), denom)
    return F.mean(F.sub(1.0, dice))


def combine(terms: dict, weights: LossWeights = LossWeights(), enabled: dict | None = None):
    """Weighted sum of the enabled terms; returns (total tensor, LossReport).

    ``terms`` maps "attr"/"attn"/"spatial" to a scalar tensor or float.
    Disabled or missing terms are reported as 0 and contribute no gradient.
    """
    enabled = enabled or {k: v is not None for k, v in terms.items()}
    report = LossReport()
    total = None
    for key in ("attr", "attn", "spatial"):
        value = terms.get(key)
        if not enabled.get(key, False) or value is None:
            continue
        if isinstance(value, Tensor):
            setattr(report, f"l_{key}", value.item())
        else:
            setattr(report, f"l_{key}", float(value))
            value = as_tensor(value)
        part = F.mul(value, float(getattr(weights, key)))
        total = part if total is None else F.add(total, part)
    if total is None:
        raise ConfigError("all loss terms are disabled")
    # the report total is recomputed in double precision from the reported terms
    report.total = sum(getattr(weights, k) * getattr(report, f"l_{k}") for k in ("attr", "attn", "spatial")
                       if enabled.get(k, False) and terms.get(k) is not None)
    return total, report
