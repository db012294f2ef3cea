"""Classification metrics, rank-based AUC and attention hit rate."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from maanet.errors import ConfigError, UndefinedMetricError
from maanet.imageops import bilinear_resize


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class ConfusionMetrics:
    counts: ConfusionCounts
    acc: float
    spec: float
    prec: float
    rec: float
    f1: float
    degenerate: tuple  # names of metrics whose denominator was 0

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("acc", "spec", "prec", "rec", "f1")}
        d.update(asdict(self.counts))
        d["degenerate"] = list(self.degenerate)
        return d


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def confusion_metrics(scores, labels, threshold: float = 0.5) -> ConfusionMetrics:
    """Counts at ``score >= threshold`` and the derived rates; any 0/0 is
    reported as 0 and listed in ``degenerate``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.size == 0:
        raise UndefinedMetricError("confusion metrics need at least one sample")
    pred = scores >= threshold
    counts = ConfusionCounts(tp=int(np.sum(pred & labels)), fp=int(np.sum(pred & ~labels)),
                             tn=int(np.sum(~pred & ~labels)), fn=int(np.sum(~pred & labels)))
    flags: list = []
    acc = (counts.tp + counts.tn) / counts.n
    spec = _ratio(counts.tn, counts.tn + counts.fp, "spec", flags)
    prec = _ratio(counts.tp, counts.tp + counts.fp, "prec", flags)
    rec = _ratio(counts.tp, counts.tp + counts.fn, "rec", flags)
    f1 = _ratio(2 * prec * rec, prec + rec, "f1", flags)
    return ConfusionMetrics(counts, acc, spec, prec, rec, f1, tuple(flags))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s_pos > s_neg) + 0.5 P(s_pos == s_neg).

    Uses mid-ranks over a single sort, O(N log N).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # tie groups get the mean of their 1-based positions
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.size]
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class HitRate:
    rate: float
    hits: int
    evaluated: int
    excluded_empty: int


def overlap(map_up: np.ndarray, mask: np.ndarray, map_threshold: float = 0.5, measure: str = "coverage") -> float:
    a = map_up >= map_threshold
    g = mask > 0
    inter = np.logical_and(a, g).sum()
    if measure == "coverage":
        return inter / g.sum()
    if measure == "iou":
        return inter / np.logical_or(a, g).sum()
    raise ConfigError(f"unknown overlap measure {measure!r}")


def hit_rate(maps, masks, map_threshold: float = 0.5, overlap_threshold: float = 0.5,
             measure: str = "coverage") -> HitRate:
    """Fraction of samples whose binarised, upsampled map overlaps the mask by
    strictly more than ``overlap_threshold``. Samples with empty masks are
    skipped and counted."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks)
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    H, W = masks.shape[-2:]
    hits = evaluated = empty = 0
    for m, g in zip(maps, masks):
        if not (g > 0).any():
            empty += 1
            continue
        up = bilinear_resize(m, H, W)
        evaluated += 1
        if overlap(up, g, map_threshold, measure) > overlap_threshold:
            hits += 1
    if evaluated == 0:
        raise UndefinedMetricError("hit rate is undefined: every mask is empty")
    return HitRate(rate=hits / evaluated, hits=hits, evaluated=evaluated, excluded_empty=empty)
