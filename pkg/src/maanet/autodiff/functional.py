"""Differentiable primitives.

Every function takes/returns :class:`Tensor` and registers a backward rule
through :func:`make_output`. Loop nesting is fixed so that accumulation order,
and therefore every float result, is reproducible run to run.
"""

from __future__ import annotations

import numpy as np

from maanet.autodiff.tensor import Tensor, as_tensor, make_output
from maanet.errors import ContractError, ShapeError


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b, op):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError(f"{op}: at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_output("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_output("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (e.g. N×1×H×W map times N×C×H×W features)."""
    a, b = _pair(a, b, "multiply")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_output("multiply", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "divide")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_output("divide", out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return make_output("neg", -x.data, (x,), lambda g: (-g,))


# -- nonlinearities --------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data).astype(x.dtype, copy=False)
    return make_output("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)  # non-finite results are rejected by make_output
    return make_output("log", out, (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return make_output("exp", e, (x,), lambda g: (g * e,))


# -- reductions and reshaping ----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(np.reshape(g, np.shape(out)), axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(np.reshape(g, np.shape(out)), axes)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return make_output("mean", np.asarray(out, dtype=x.dtype), (x,), bw)


def reshape(x: Tensor, dims) -> Tensor:
    shape = x.shape
    try:
        out = x.data.reshape(dims)
    except ValueError:
        raise ShapeError("reshape", shape, dims) from None
    return make_output("reshape", out, (x,), lambda g: (g.reshape(shape),))


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the gradient is scatter-added into a zero
    buffer so repeated indices accumulate."""
    out = np.ascontiguousarray(x.data[key])
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g.reshape(x.data[key].shape))
        return (full,)

    return make_output("index", out, (x,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return make_output("concat", out, tensors, bw)


# -- dense layers ------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of dims N×in and weight out×in."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError("linear", weight.shape, bias.shape, detail="bias")
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("linear", out, inputs, bw)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, computed as one im2col GEMM.

    x: N×C×H×W, weight: O×C×kH×kW. Output size per axis is
    floor((in + 2p - k)/s) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="empty output")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = weight.data.reshape(o, -1)
    out = (wm @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(o, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out, inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: N×C×H×W -> N×C."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        return (np.broadcast_to((g / area).reshape(n, c, 1, 1), x.shape).astype(x.dtype),)

    return make_output("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential momentum); in eval mode
    only the running buffers are read.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0, 2, 3)
    shp = (1, -1, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ContractError("batch_norm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(shp)
        var = (xc * xc).mean(axis=axes)
        m = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        xc = x.data - mu.reshape(shp)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shp)
            if training:
                m = x.data.size // x.shape[1]
                s1 = dxhat.sum(axis=axes).reshape(shp)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(shp)
                gx = (inv.reshape(shp) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(shp)
        return gx, ggamma, gbeta

    return make_output("batch_norm", out, (x, gamma, beta), bw)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Elementwise binary cross-entropy on raw logits.

    Uses max(x, 0) - x*l + log(1 + exp(-|x|)), which equals
    -[l log s(x) + (1-l) log(1-s(x))] without ever evaluating log(0).
    """
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    lab = lab.astype(logits.dtype, copy=False)
    if lab.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, lab.shape)
    xd = logits.data
    out = np.maximum(xd, 0) - xd * lab + np.log1p(np.exp(-np.abs(xd)))
    s = sigmoid_array(xd).astype(xd.dtype, copy=False)
    return make_output("bce_with_logits", out, (logits,), lambda g: (g * (s - lab),))


_OPS = {
    "conv2d": conv2d,
    "add": add,
    "sub": sub,
    "multiply": mul,
    "divide": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "linear": linear,
    "global_avg_pool": global_avg_pool,
    "concat": lambda *ts, axis=1: concat(ts, axis=axis),
    "mean": mean,
    "sum": sum,
    "log": log,
    "exp": exp,
    "batch_norm": batch_norm,
    "bce_with_logits": bce_with_logits,
}


def apply(op_kind: str, *inputs, **params) -> Tensor:
    """Run a primitive by name, e.g. ``apply("conv2d", x, w, stride=2, padding=1)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **params)
