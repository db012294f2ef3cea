"""Tensor value type and the reverse-mode tape."""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

from maanet.errors import ContractError, NumericError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_op_counter = itertools.count()


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    ``precision(np.float64)`` is the gradient-check mode; training runs in
    float32.
    """
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One executed primitive: its inputs, output and backward rule.

    ``backward`` maps the output gradient to a tuple with one entry per input
    (``None`` where the input needs no gradient).
    """

    __slots__ = ("kind", "inputs", "backward", "seq", "output")

    def __init__(self, kind: str, inputs: tuple, backward: Callable):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_op_counter)
        self.output = None

    def __repr__(self) -> str:
        return f"Node({self.kind}, seq={self.seq})"


class Tensor:
    """Dense float array that may participate in the gradient tape.

    Rank is limited to 1-4. Leaves created with ``requires_grad=True`` own a
    zero-initialised ``grad`` buffer of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "retains_grad", "_touched")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ContractError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node: Node | None = None
        self.name = name
        self.retains_grad = False
        self._touched = False

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of dims {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after ``backward``."""
        self.retains_grad = True
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(dims={list(self.shape)}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar (implemented in functional) ----------------------
    def __add__(self, other):
        from maanet.autodiff import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from maanet.autodiff import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from maanet.autodiff import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from maanet.autodiff import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from maanet.autodiff import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from maanet.autodiff import functional as F
        return F.div(other, self)

    def __neg__(self):
        from maanet.autodiff import functional as F
        return F.neg(self)

    def __getitem__(self, key):
        from maanet.autodiff import functional as F
        return F.index(self, key)

    def sum(self, axis=None, keepdims=False):
        from maanet.autodiff import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from maanet.autodiff import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *dims):
        from maanet.autodiff import functional as F
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return F.reshape(self, dims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def make_output(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a primitive's result, checking finiteness and recording it on the tape."""
    if not np.isfinite(data).all():
        raise NumericError(f"{kind} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, tuple(inputs), backward_fn)
        node.output = out
        out.node = node
    return out


class Graph:
    """The ordered record of operations that produced a tensor.

    ``ops`` is a topological order (inputs before consumers), so walking it in
    reverse visits every recorded operation exactly once.
    """

    def __init__(self, ops: list[Node]):
        self.ops = ops

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        ops: list[Node] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(ops)
        # iterative post-order DFS; deep nets would overflow recursion
        stack = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                ops.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp.node, False))
        return cls(ops)

    def __len__(self) -> int:
        return len(self.ops)

    def kinds(self) -> list[str]:
        return [n.kind for n in self.ops]

    def ancestors(self, root: Tensor, stop: Sequence[Tensor] = ()) -> set[int]:
        """ids of tensors reachable backwards from ``root`` without passing through ``stop``."""
        stop_ids = {id(t) for t in stop}
        reached: set[int] = set()
        frontier = [root]
        while frontier:
            t = frontier.pop()
            if id(t) in reached:
                continue
            reached.add(id(t))
            if id(t) in stop_ids or t.node is None:
                continue
            frontier.extend(t.node.inputs)
        return reached


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    Leaves reached through several paths receive the sum of the branch
    gradients. Returns the traversed graph.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the gradient tape")
    if graph is None:
        graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.ops):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if out.retains_grad:
            out.grad += g
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad += ig
                inp._touched = True
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
    if loss.node is None and loss.requires_grad:
        loss.grad += 1
    for node in graph.ops:
        for inp in node.inputs:
            if inp.node is None and inp.requires_grad and not np.isfinite(inp.grad).all():
                raise NumericError(f"non-finite gradient reached leaf {inp.name or inp!r}")
    return graph
