"""Resampling helpers shared by the data pipeline, metrics and heatmap export."""

from __future__ import annotations

import numpy as np

from maanet.errors import ContractError


def _bilinear_weights(n_in: int, n_out: int):
    # half-pixel centres, edges clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling over the last two axes.

    Each output value is a convex combination of input values, so the result
    stays within [min, max] of the input.
    """
    arr = np.asarray(arr)
    if arr.ndim < 2:
        raise ContractError("bilinear_resize needs at least 2 dims")
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ylo, yhi, fy = _bilinear_weights(h, out_h)
    xlo, xhi, fx = _bilinear_weights(w, out_w)
    work = arr.astype(np.float64)
    rows = work[..., ylo, :] * (1 - fy)[:, None] + work[..., yhi, :] * fy[:, None]
    out = rows[..., xlo] * (1 - fx) + rows[..., xhi] * fx
    lo_v, hi_v = work.min(), work.max()
    return np.clip(out, lo_v, hi_v)


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    arr = np.asarray(arr)
    h, w = arr.shape[-2:]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[..., ys, :][..., xs]


def area_downsample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average non-overlapping blocks; requires integer downscale factors."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    if h % out_h or w % out_w:
        raise ContractError(f"area_downsample: {h}x{w} is not a multiple of {out_h}x{out_w}")
    fh, fw = h // out_h, w // out_w
    lead = arr.shape[:-2]
    return arr.reshape(*lead, out_h, fh, out_w, fw).mean(axis=(-3, -1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] floats to 0..255 with round-half-up."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)
