"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation builds a new :class:`Value` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Graphs are
rebuilt on every forward pass; :func:`backward` walks them once in reverse
topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch

PRIMITIVES = (
    "matmul", "add", "sub", "mul", "concat", "slice", "sum", "mean", "abs",
    "square", "exp", "log", "sigmoid", "tanh", "elu", "softplus", "softmax",
    "broadcast", "transpose", "reshape", "gather_rows", "scatter_add_rows",
)


class Value:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.op: str | None = None
        self.parents: tuple[Value, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Value{label}(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(kind: str, data: np.ndarray, parents: Sequence[Value], backward_fn) -> Value:
    if not np.all(np.isfinite(data)):
        raise NonFinite(f"{kind} produced non-finite values")
    out = Value(data)
    out.op = kind
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast shapes {shapes}") from exc


# ---------------------------------------------------------------- binary

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a.shape, b.shape)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a.shape, b.shape)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), backward)


def matmul(a, b) -> Value:
    """Batched matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul contraction mismatch {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def _matmul_flat(a: Value, b: Value) -> Value:
    # stacked operand times a single matrix: one BLAS call on the flattened rows
    a2 = a.data.reshape(-1, a.shape[-1])
    out_shape = a.shape[:-1] + (b.shape[-1],)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make("matmul", (a2 @ b.data).reshape(out_shape), (a, b), backward)


# ---------------------------------------------------------------- structural

def concat(values: Sequence, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = [v.shape[axis] for v in values]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", data, values, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_(x, index) -> Value:
    x = as_value(x)
    data = x.data[index]

    basic = all(isinstance(i, (slice, int, type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make("slice", np.array(data, dtype=np.float64), (x,), backward)


def broadcast(x, shape) -> Value:
    x = as_value(x)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {x.shape} to {shape}") from exc
    return _make("broadcast", data, (x,), lambda g: (_unbroadcast(g, x.shape),))


def transpose(x, axes=None) -> Value:
    x = as_value(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x, shape) -> Value:
    x = as_value(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _make("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def gather_rows(x, index, axis: int = 0) -> Value:
    """Select entries of ``x`` along ``axis``; backward scatters into zeros."""
    x = as_value(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
        raise ShapeMismatch(f"gather index out of range for axis of size {x.shape[axis]}")

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
        return (out,)

    return _make("gather_rows", np.take(x.data, index, axis=axis), (x,), backward)


def scatter_add_rows(x, index, size: int, axis: int = 0) -> Value:
    """Sum entries of ``x`` along ``axis`` into ``size`` buckets given by ``index``."""
    x = as_value(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[axis],):
        raise ShapeMismatch(f"scatter index of shape {index.shape} for axis size {x.shape[axis]}")
    shape = list(x.shape)
    shape[axis] = size
    data = np.zeros(shape)
    np.add.at(np.moveaxis(data, axis, 0), index, np.moveaxis(x.data, axis, 0))
    return _make("scatter_add_rows", data, (x,),
                 lambda g: (np.take(g, index, axis=axis),))


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False) -> Value:
    x = as_value(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


# ---------------------------------------------------------------- elementwise

def _unary(kind, fwd, dfdx):
    def op(x) -> Value:
        x = as_value(x)
        with np.errstate(all="ignore"):
            y = fwd(x.data)
        return _make(kind, y, (x,), lambda g: (g * dfdx(x.data, y),))

    op.__name__ = kind
    return op


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


abs_ = _unary("abs", np.abs, lambda x, y: np.sign(x))
square = _unary("square", np.square, lambda x, y: 2.0 * x)
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
sigmoid = _unary("sigmoid", _sigmoid, lambda x, y: y * (1.0 - y))
tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
# alpha = 1
elu = _unary("elu", lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))),
             lambda x, y: np.where(x > 0, 1.0, y + 1.0))
softplus = _unary("softplus", lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def softmax(x, axis: int = -1) -> Value:
    x = as_value(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


_DISPATCH = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "slice": slice_, "sum": sum_, "mean": mean, "abs": abs_, "square": square,
    "exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh, "elu": elu,
    "softplus": softplus, "softmax": softmax, "broadcast": broadcast,
    "transpose": transpose, "reshape": reshape, "gather_rows": gather_rows,
    "scatter_add_rows": scatter_add_rows,
}


def eval_primitive(kind: str, inputs: Sequence, **attrs) -> Value:
    """Apply the primitive named ``kind`` to ``inputs`` (keyword attributes per kind)."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward

def _topological(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    # interior gradients live only for this pass; leaves accumulate across calls
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if node.op is None:
            if g is not None:
                leaves.append((node, g))
            continue
        node.grad = g
        if g is None or node._backward is None:
            continue
        for parent, gp in zip(node.parents, node._backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = gp if key not in pending else pending[key] + gp
    for leaf, g in leaves:
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"non-finite gradient reached {leaf!r}")
        leaf.grad = (leaf.grad if leaf.grad is not None else 0.0) + g


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                               coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    When ``coords`` (flat indices) is given only those entries are filled; the
    rest of the returned array is NaN.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"f is not finite near coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-7) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
