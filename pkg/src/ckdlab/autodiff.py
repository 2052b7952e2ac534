"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
Constants (tensors without a ``node_id``) never enter the tape; they are
captured by value in the nodes that consume them.

    tape = Tape()
    x = tape.variable(np.ones((2, 3)))
    loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x.node_id]  # -> 2 * x
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""

    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class DomainError(ValueError):
    """A primitive was applied outside its mathematical domain."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


class Tensor:
    """Dense float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, node_id: int | None = None,
                 tape: Tape | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / float(other))

    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)
    def softmax(self, tau: float = 1.0): return softmax(self, tau)
    def logsumexp(self): return logsumexp(self)


def constant(value) -> Tensor:
    """Wrap a value as an off-tape constant."""
    if isinstance(value, Tensor):
        return Tensor(value.data)
    return Tensor(_as_array(value))


@dataclass
class Node:
    op: str
    inputs: tuple  # node ids (int) or constant ndarrays
    attrs: dict
    value: np.ndarray
    requires_grad: bool


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored in creation order, which is a topological order since a
    node can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, requires_grad: bool = True) -> Tensor:
        """Register a leaf tensor."""
        data = _as_array(value).copy()
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), {}, data, requires_grad))
        return Tensor(data, requires_grad, node_id, self)

    def _record(self, op: str, inputs: tuple, attrs: dict, value: np.ndarray) -> Tensor:
        rg = any(isinstance(i, int) and self.nodes[i].requires_grad for i in inputs)
        if op == "stop_gradient":
            rg = False
        node_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, attrs, value, rg))
        return Tensor(value, rg, node_id, self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every grad-requiring node.

        Leaves that the loss does not depend on get explicit zeros.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or not node.requires_grad or node.op == "leaf":
                continue
            in_values = [self.nodes[i].value if isinstance(i, int) else i for i in node.inputs]
            in_grads = _BACKWARD[node.op](g, node.value, in_values, **node.attrs)
            for inp, ig in zip(node.inputs, in_grads):
                if not isinstance(inp, int) or ig is None or not self.nodes[inp].requires_grad:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else prev + ig
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf" and node.requires_grad and nid not in grads:
                grads[nid] = np.zeros_like(node.value)
        for nid, node in enumerate(self.nodes):
            if not node.requires_grad:
                grads.pop(nid, None)
        return grads

    def replay(self, leaf_values: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node forward, optionally substituting leaf values."""
        leaf_values = leaf_values or {}
        out: list[np.ndarray] = []
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                out.append(_as_array(leaf_values.get(nid, node.value)))
                continue
            args = [out[i] if isinstance(i, int) else i for i in node.inputs]
            out.append(_FORWARD[node.op](*args, **node.attrs))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _apply(op: str, operands: tuple, attrs: dict | None = None) -> Tensor:
    attrs = attrs or {}
    tensors = [as_tensor(x) for x in operands]
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise ValueError(f"{op}: operands live on different tapes")
    value = _FORWARD[op](*(t.data for t in tensors), **attrs)
    if not tapes:
        return Tensor(value)
    tape = next(iter(tapes.values()))
    inputs = tuple(t.node_id if t.node_id is not None else t.data for t in tensors)
    return tape._record(op, inputs, attrs, value)


# ---------------------------------------------------------------- forward rules

def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


def _f_add(a, b):
    _check_broadcast("add", a, b)
    return a + b


def _f_sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b


def _f_mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def _f_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _f_log(a):
    if np.any(a <= 0.0):
        raise DomainError(f"log: non-positive input (min {a.min():.3g})")
    return np.log(a)


def _f_softmax(a, tau):
    s = a / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _f_logsumexp(a):
    m = a.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True))


def _f_concat(*arrays):
    cols = {a.shape[1:] for a in arrays}
    if len(cols) != 1 or any(a.ndim != 2 for a in arrays):
        raise ShapeError("concat_rows", *(a.shape for a in arrays))
    return np.concatenate(arrays, axis=0)


def _f_slice(a, start, stop):
    if a.ndim < 1 or not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice_rows[{start}:{stop}]", a.shape)
    return a[start:stop]


_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "scale": lambda a, c: a * c,
    "matmul": _f_matmul,
    "relu": lambda a: np.maximum(a, 0.0),
    "exp": np.exp,
    "log": _f_log,
    "sum": lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    "mean": lambda a, axis, keepdims: np.mean(a, axis=axis, keepdims=keepdims),
    "concat_rows": _f_concat,
    "slice_rows": _f_slice,
    "softmax": _f_softmax,
    "logsumexp": _f_logsumexp,
    "stop_gradient": lambda a: a,
}


# ---------------------------------------------------------------- backward rules

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _b_mean(g, out, ins, axis, keepdims):
    (a,) = ins
    n = a.size if axis is None else a.shape[axis]
    return (_expand_reduced(g, a.shape, axis, keepdims) / n,)


def _b_softmax(g, out, ins, tau):
    inner = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - inner) / tau,)


def _b_logsumexp(g, out, ins):
    (a,) = ins
    return (g * np.exp(a - out),)


def _b_concat(g, out, ins):
    grads, start = [], 0
    for a in ins:
        grads.append(g[start:start + a.shape[0]])
        start += a.shape[0]
    return tuple(grads)


def _b_slice(g, out, ins, start, stop):
    (a,) = ins
    full = np.zeros_like(a)
    full[start:stop] = g
    return (full,)


_BACKWARD: dict[str, Callable[..., tuple[Any, ...]]] = {
    "add": lambda g, out, ins: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
    "sub": lambda g, out, ins: (_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)),
    "mul": lambda g, out, ins: (_unbroadcast(g * ins[1], ins[0].shape),
                                _unbroadcast(g * ins[0], ins[1].shape)),
    "scale": lambda g, out, ins, c: (g * c,),
    "matmul": lambda g, out, ins: (g @ ins[1].T, ins[0].T @ g),
    "relu": lambda g, out, ins: (g * (ins[0] > 0.0),),
    "exp": lambda g, out, ins: (g * out,),
    "log": lambda g, out, ins: (g / ins[0],),
    "sum": lambda g, out, ins, axis, keepdims: (
        _expand_reduced(g, ins[0].shape, axis, keepdims).copy(),),
    "mean": _b_mean,
    "concat_rows": _b_concat,
    "slice_rows": _b_slice,
    "softmax": _b_softmax,
    "logsumexp": _b_logsumexp,
    "stop_gradient": lambda g, out, ins: (None,),
}


# ---------------------------------------------------------------- public primitives

def add(a, b) -> Tensor: return _apply("add", (a, b))
def sub(a, b) -> Tensor: return _apply("sub", (a, b))
def mul(a, b) -> Tensor: return _apply("mul", (a, b))
def matmul(a, b) -> Tensor: return _apply("matmul", (a, b))
def relu(a) -> Tensor: return _apply("relu", (a,))
def exp(a) -> Tensor: return _apply("exp", (a,))
def log(a) -> Tensor: return _apply("log", (a,))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), {"c": float(c)})


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("sum", (a,), {"axis": axis, "keepdims": keepdims})


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("mean", (a,), {"axis": axis, "keepdims": keepdims})


def concat_rows(*tensors) -> Tensor:
    return _apply("concat_rows", tensors)


def slice_rows(a, start: int, stop: int) -> Tensor:
    return _apply("slice_rows", (a,), {"start": int(start), "stop": int(stop)})


def softmax(a, tau: float = 1.0) -> Tensor:
    """Softmax of ``a / tau`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"softmax: temperature must be positive, got {tau}")
    return _apply("softmax", (a,), {"tau": float(tau)})


def logsumexp(a) -> Tensor:
    """``log(sum(exp(a)))`` along the last axis, keeping that axis."""
    return _apply("logsumexp", (a,))


def log_softmax(a, tau: float = 1.0) -> Tensor:
    if not tau > 0:
        raise ValueError(f"log_softmax: temperature must be positive, got {tau}")
    s = a if tau == 1.0 else scale(a, 1.0 / tau)
    return sub(s, logsumexp(s))


def stop_gradient(a) -> Tensor:
    """Identity forward, zero backward."""
    return _apply("stop_gradient", (a,))


# ---------------------------------------------------------------- helpers

def evaluate_graph(inputs: Mapping[str, np.ndarray], program: Callable[..., Tensor],
                   requires_grad: bool = True) -> tuple[Tensor, Tape]:
    """Run ``program(**leaves)`` on a fresh tape and return (output, tape)."""
    tape = Tape()
    leaves = {name: tape.variable(v, requires_grad) for name, v in inputs.items()}
    return program(**leaves), tape


def grad(fn: Callable[..., Tensor], *arrays: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Value of a scalar program and its gradient w.r.t. each positional input."""
    tape = Tape()
    leaves = [tape.variable(a) for a in arrays]
    out = fn(*leaves)
    grads = tape.backward(out)
    return out.item(), [grads[x.node_id] for x in leaves]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out
