"""Float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Graph` (entered with
``with Graph() as g``) whenever at least one input requires a gradient.
Outside a graph every op is a plain numpy computation, which is what the
inference runtime relies on.

Shapes are explicit: binary ops accept equal shapes or a scalar (shape ``()``)
on either side, nothing else.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through recorded ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Graph:
    """Append-only record of the ops of one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Graph]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_graph() -> Optional[Graph]:
    st = _stack()
    return st[-1] if st else None


def record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str = "") -> Tensor:
    """Wrap ``out`` as a tensor and, if needed, put it on the active graph.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs, name=name)
    g = active_graph()
    if needs and g is not None:
        res._node = len(g.nodes)
        g.nodes.append(Node(tuple(inputs), res, backward_fn))
    return res


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate ``.grad`` on every leaf tensor that requires a gradient.

    Gradients accumulate into existing ``.grad`` buffers. The graph is spent
    afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.consumed:
        raise ContractError("graph already used for a backward pass")
    if loss._node is None or loss._node >= len(graph.nodes) or graph.nodes[loss._node].output is not loss:
        raise ContractError("loss was not produced on this graph")
    graph.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss._node + 1]):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise DimensionError(f"gradient shape {g.shape} does not match input {t.shape}")
            if t._node is not None:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g
    graph.nodes.clear()


# ---------------------------------------------------------------------------
# shape helpers


def _same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(shape)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return record(A @ B, (a, b), bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., k] @ w[k, n]``; leading dims of ``x`` are kept."""
    if w.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot apply {w.shape} to {x.shape}")
    X, W = x.data, w.data
    lead = X.shape[:-1]
    X2 = X.reshape(-1, X.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.T).reshape(X.shape) if x.requires_grad else None
        gw = X2.T @ g2 if w.requires_grad else None
        return gx, gw

    return record((X2 @ W).reshape(lead + (W.shape[1],)), (x, w), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "mul")
    A, B = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * B, A.shape) if a.requires_grad else None
        gb = _reduce_to(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return record(A * B, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: {a.shape} has {a.size} elements, {shape} needs {math.prod(shape)}")
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.exp(-np.logaddexp(0.0, -x))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return record(out, (a,), bw)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to unit RMS, then multiply by ``weight``."""
    if weight.data.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"rmsnorm: weight {weight.shape} does not match input {x.shape}")
    X, W = x.data, weight.data
    d = X.shape[-1]
    inv = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    xhat = X * inv

    def bw(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * W
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return record(xhat * W, (x, weight), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding: ids must lie in [0, {vocab}), got range [{ids.min()}, {ids.max()}]")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record(table.data[ids], (table,), bw)


def masked_softmax(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    """Stable softmax over the last axis; ``mask`` broadcasts against ``x``."""
    if mask is None:
        xm = x
    else:
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        xm = np.where(mask, x, -np.inf)
    e = np.exp(xm - xm.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row softmax; entries where ``mask`` is False come out exactly 0."""
    mk = None
    if mask is not None:
        mk = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        if mk.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {mk.shape} does not match input {x.shape}")
    p = masked_softmax(x.data, mk)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record(p, (x,), bw)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits[..., V]``.

    With ``weights`` (same shape as ``targets``) the mean is weighted and
    normalized by the weight sum.
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != t.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} do not match targets {t.shape}")
    V = logits.shape[-1]
    lp = log_softmax(logits.data).reshape(-1, V)
    flat = t.reshape(-1)
    if flat.size == 0:
        raise ContractError("cross_entropy over zero positions")
    if flat.min() < 0 or flat.max() >= V:
        raise DimensionError(f"cross_entropy: targets must lie in [0, {V})")
    if weights is None:
        w = np.full(flat.size, 1.0 / flat.size)
    else:
        w = np.asarray(weights, dtype=DTYPE)
        if w.shape != t.shape:
            raise DimensionError(f"cross_entropy: weights {w.shape} do not match targets {t.shape}")
        total = w.sum()
        if total <= 0:
            raise ContractError("cross_entropy weights must have a positive sum")
        w = w.reshape(-1) / total
    rows = np.arange(flat.size)
    loss = -(lp[rows, flat] * w).sum()

    def bw(g):
        p = np.exp(lp)
        p[rows, flat] -= 1.0
        return ((p * (w * g)[:, None]).reshape(logits.shape),)

    return record(np.asarray(loss), (logits,), bw)


def mse(a: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant array."""
    target = np.asarray(target, dtype=DTYPE)
    if a.shape != target.shape:
        raise DimensionError(f"mse: {a.shape} vs {target.shape}")
    diff = a.data - target
    return record(np.asarray((diff * diff).mean()), (a,), lambda g: (g * 2.0 * diff / diff.size,))


# ---------------------------------------------------------------------------
# testing aid


def numerical_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error, guarded against all-zero references."""
    num = np.abs(a - b).max()
    den = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(num / den)
