"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operations the model needs are provided. Every op that touches a
tracked input records a :class:`Node`; :func:`backward` replays those nodes
in exact reverse execution order.
"""

from __future__ import annotations

import itertools
import weakref
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

EXP_CLAMP = 60.0
LN_EPS = 1e-7

_sequence = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "_out", "backward")

    def __init__(self, op: str, inputs: tuple, out: "Tensor", backward: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        # weak, so a tensor and its node do not form a cycle; the graph is then
        # freed by refcounting as soon as the loss goes out of scope
        self._out = weakref.ref(out)
        self.backward = backward

    @property
    def out(self) -> "Tensor":
        return self._out()

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """An n-d float64 array that may carry a gradient.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: track this tensor as a differentiable leaf.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> "Graph":
        return backward(self)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negate(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), negate(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return multiply(self, 1.0 / float(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_along_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_along_axis(self, axis, keepdims)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "multiply")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("multiply", a.data * b.data, (a, b), bw)


def negate(a: Tensor) -> Tensor:
    return _result("negate", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    """``exp`` with its argument clamped to [-60, 60]; zero gradient outside."""
    inside = np.abs(a.data) <= EXP_CLAMP
    out = np.exp(np.clip(a.data, -EXP_CLAMP, EXP_CLAMP))

    def bw(g):
        return (g * out * inside,)

    return _result("exp", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result("relu", a.data * mask, (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * inside,)

    return _result("clamp", np.clip(a.data, lo, hi), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * a.data * g,)

    return _result("square", a.data * a.data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and scans


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum_along_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", out, (a,), bw)


def mean_along_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[_norm_axis(axis, a.ndim)]
    return multiply(sum_along_axis(a, axis, keepdims), 1.0 / n)


def cumulative_sum(a: Tensor, axis: int, exclusive: bool = False) -> Tensor:
    """Running sum along ``axis``; ``exclusive`` shifts it so entry i sums j < i."""
    axis = _norm_axis(axis, a.ndim)
    out = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = np.concatenate(
            [np.zeros_like(np.take(out, [0], axis=axis)), np.take(out, range(a.shape[axis] - 1), axis=axis)],
            axis=axis,
        )

    def bw(g):
        # adjoint of a forward scan is a reverse scan
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        if exclusive:
            rev = rev - g
        return (rev,)

    return _result("cumsum", out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _result("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", out, (a, b), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _result("reshape", out, (a,), bw)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    i, j = _norm_axis(i, a.ndim), _norm_axis(j, a.ndim)
    out = np.ascontiguousarray(np.swapaxes(a.data, i, j))

    def bw(g):
        return (np.swapaxes(g, i, j),)

    return _result("swapaxes", out, (a,), bw)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; the gradient scatters back into place."""
    out = np.array(a.data[key], dtype=np.float64)  # copy; keeps 0-d results 0-d

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _result("index", out, (a,), bw)


# ---------------------------------------------------------------------------
# graph replay


class Graph:
    """Operations reachable from an output, in execution order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, out: Tensor) -> "Graph":
        seen, stack, nodes = set(), [out], []
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def leaves(self) -> list:
        found, seen = [], set()
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None and id(t) not in seen:
                    seen.add(id(t))
                    found.append(t)
        return found

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Returns the replayed graph (useful for inspection in tests).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict = {}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            target = leaf_grads if inp._node is None else pending
            prev = target.get(key)
            target[key] = gi if prev is None else prev + gi
    for leaf in graph.leaves():
        g = leaf_grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return graph
