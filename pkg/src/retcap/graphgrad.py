"""Minimal reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every operation as a :class:`Node` in creation
order; :meth:`Tape.backward` walks the nodes in reverse.  :class:`Eager`
exposes the same operation methods but returns plain arrays and records
nothing, so model code written against the op methods runs unchanged for
inference.

All values are float64.  ``clamp-min-zero`` and ``relu`` use the
subgradient 0 at exactly 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "OPS",
    "Node",
    "Tape",
    "Eager",
    "ShapeError",
    "NonFiniteError",
    "ZeroNormError",
    "GradCheckError",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ZeroNormError(ValueError):
    pass


class GradCheckError(RuntimeError):
    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


# ---------------------------------------------------------------------------
# forward / backward kernels
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _matmul_operands(a, b, trans_b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul needs 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if trans_b and b.ndim != 2:
        raise ShapeError(f"matmul with trans_b needs a 2-D right operand, got {b.shape}")
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b.T if trans_b else (b[:, None] if b.ndim == 1 else b)
    if a2.shape[1] != b2.shape[0]:
        shown = f"{b.shape}{'^T' if trans_b else ''}"
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {shown}")
    return a2, b2


def _out_shape_matmul(a, b, trans_b):
    a2, b2 = _matmul_operands(a, b, trans_b)
    rows = () if a.ndim == 1 else (a2.shape[0],)
    cols = () if (b.ndim == 1 and not trans_b) else (b2.shape[1],)
    return rows + cols


def _fwd_matmul(vals, trans_b=False):
    a, b = vals
    a2, b2 = _matmul_operands(a, b, trans_b)
    return (a2 @ b2).reshape(_out_shape_matmul(a, b, trans_b))


def _bwd_matmul(g, vals, out, trans_b=False):
    a, b = vals
    a2, b2 = _matmul_operands(a, b, trans_b)
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    ga = (g2 @ b2.T).reshape(a.shape)
    gb2 = a2.T @ g2
    gb = gb2.T if trans_b else gb2.reshape(b.shape)
    return [ga, gb]


def _fwd_add(vals):
    a, b = vals
    _broadcast_shape(a, b)
    return a + b


def _bwd_add(g, vals, out):
    a, b = vals
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _fwd_mul(vals):
    a, b = vals
    _broadcast_shape(a, b)
    return a * b


def _bwd_mul(g, vals, out):
    a, b = vals
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fwd_sigmoid(vals):
    (x,) = vals
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bwd_sigmoid(g, vals, out):
    return [g * out * (1.0 - out)]


def _fwd_tanh(vals):
    return np.tanh(vals[0])


def _bwd_tanh(g, vals, out):
    return [g * (1.0 - out * out)]


def _fwd_relu(vals):
    return np.maximum(vals[0], 0.0)


def _bwd_relu(g, vals, out):
    return [g * (vals[0] > 0.0)]


def _fwd_concat(vals, axis=-1):
    shapes = [v.shape for v in vals]
    if len({v.ndim for v in vals}) != 1:
        raise ShapeError(f"concat rank mismatch: {shapes}")
    ax = axis % vals[0].ndim
    rest = {tuple(s[:ax] + s[ax + 1:]) for s in shapes}
    if len(rest) != 1:
        raise ShapeError(f"concat shape mismatch along axis {axis}: {shapes}")
    return np.concatenate(vals, axis=ax)


def _bwd_concat(g, vals, out, axis=-1):
    ax = axis % g.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return list(np.split(g, bounds, axis=ax))


def _slicer(ndim, axis, start, stop):
    index = [slice(None)] * ndim
    index[axis % ndim] = slice(start, stop)
    return tuple(index)


def _fwd_slice(vals, start, stop, axis=-1):
    (x,) = vals
    n = x.shape[axis % x.ndim]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {x.shape} axis {axis}")
    return x[_slicer(x.ndim, axis, start, stop)].copy()


def _bwd_slice(g, vals, out, start, stop, axis=-1):
    (x,) = vals
    gx = np.zeros_like(x)
    gx[_slicer(x.ndim, axis, start, stop)] = g
    return [gx]


def _fwd_gather_rows(vals, indices):
    (x,) = vals
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"gather-rows needs a 2-D table, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather-rows index out of range for table {x.shape}")
    return x[idx]


def _bwd_gather_rows(g, vals, out, indices):
    gx = np.zeros_like(vals[0])
    np.add.at(gx, np.asarray(indices, dtype=np.int64), g)
    return [gx]


def _fwd_log_softmax(vals, axis=-1):
    (x,) = vals
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _bwd_log_softmax(g, vals, out, axis=-1):
    return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


def _fwd_sum(vals, axis=None, keepdims=False):
    return np.asarray(vals[0].sum(axis=axis, keepdims=keepdims))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _bwd_sum(g, vals, out, axis=None, keepdims=False):
    return [_expand_reduced(g, vals[0].shape, axis, keepdims)]


def _fwd_mean(vals, axis=None, keepdims=False):
    return np.asarray(vals[0].mean(axis=axis, keepdims=keepdims))


def _bwd_mean(g, vals, out, axis=None, keepdims=False):
    x = vals[0]
    count = x.size if axis is None else x.shape[axis]
    return [_expand_reduced(g, x.shape, axis, keepdims) / count]


def _fwd_l2_normalize(vals, axis=-1):
    (x,) = vals
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroNormError("l2-normalize of a zero-norm vector")
    return x / norm


def _bwd_l2_normalize(g, vals, out, axis=-1):
    x = vals[0]
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    # (I - y y^T) g / |x|
    return [(g - out * (g * out).sum(axis=axis, keepdims=True)) / norm]


def _fwd_scale(vals, c):
    return vals[0] * float(c)


def _bwd_scale(g, vals, out, c):
    return [g * float(c)]


@dataclass(frozen=True)
class _Op:
    arity: int | None  # None: variadic
    forward: Callable
    backward: Callable


OPS = {
    "matmul": _Op(2, _fwd_matmul, _bwd_matmul),
    "add": _Op(2, _fwd_add, _bwd_add),
    "elementwise-multiply": _Op(2, _fwd_mul, _bwd_mul),
    "sigmoid": _Op(1, _fwd_sigmoid, _bwd_sigmoid),
    "tanh": _Op(1, _fwd_tanh, _bwd_tanh),
    "relu": _Op(1, _fwd_relu, _bwd_relu),
    "concat": _Op(None, _fwd_concat, _bwd_concat),
    "slice": _Op(1, _fwd_slice, _bwd_slice),
    "gather-rows": _Op(1, _fwd_gather_rows, _bwd_gather_rows),
    "log-softmax": _Op(1, _fwd_log_softmax, _bwd_log_softmax),
    "sum": _Op(1, _fwd_sum, _bwd_sum),
    "mean": _Op(1, _fwd_mean, _bwd_mean),
    "l2-normalize": _Op(1, _fwd_l2_normalize, _bwd_l2_normalize),
    "scalar-multiply": _Op(1, _fwd_scale, _bwd_scale),
    "clamp-min-zero": _Op(1, _fwd_relu, _bwd_relu),
}


def _apply(kind, values, attrs):
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if op.arity is not None and len(values) != op.arity:
        raise ShapeError(f"{kind} takes {op.arity} inputs, got {len(values)}")
    if op.arity is None and not values:
        raise ShapeError(f"{kind} needs at least one input")
    with np.errstate(over="ignore", invalid="ignore"):   # reported below instead
        out = op.forward(values, **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    return out


# ---------------------------------------------------------------------------
# recording
# ---------------------------------------------------------------------------

class _OpMethods:
    """Named wrappers shared by :class:`Tape` and :class:`Eager`."""

    def record(self, kind, inputs, **attrs):
        raise NotImplementedError

    def matmul(self, a, b, trans_b=False):
        return self.record("matmul", [a, b], trans_b=trans_b)

    def add(self, a, b):
        return self.record("add", [a, b])

    def mul(self, a, b):
        return self.record("elementwise-multiply", [a, b])

    def sigmoid(self, x):
        return self.record("sigmoid", [x])

    def tanh(self, x):
        return self.record("tanh", [x])

    def relu(self, x):
        return self.record("relu", [x])

    def concat(self, xs, axis=-1):
        return self.record("concat", list(xs), axis=axis)

    def slice(self, x, start, stop, axis=-1):
        return self.record("slice", [x], start=start, stop=stop, axis=axis)

    def gather_rows(self, table, indices):
        return self.record("gather-rows", [table], indices=np.asarray(indices, dtype=np.int64))

    def log_softmax(self, x, axis=-1):
        return self.record("log-softmax", [x], axis=axis)

    def sum(self, x, axis=None, keepdims=False):
        return self.record("sum", [x], axis=axis, keepdims=keepdims)

    def mean(self, x, axis=None, keepdims=False):
        return self.record("mean", [x], axis=axis, keepdims=keepdims)

    def l2_normalize(self, x, axis=-1):
        return self.record("l2-normalize", [x], axis=axis)

    def scale(self, x, c):
        return self.record("scalar-multiply", [x], c=float(c))

    def clamp_min_zero(self, x):
        return self.record("clamp-min-zero", [x])

    def sub(self, a, b):
        return self.add(a, self.scale(b, -1.0))


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    grad: np.ndarray | None = None


class Tape(_OpMethods):
    """Ordered record of one forward computation.

    Leaves are parameters or inputs; constants are leaves that are excluded
    from the returned gradients unless asked for.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, value, attrs):
        node = Node(len(self.nodes), op, tuple(inputs), value, attrs)
        self.nodes.append(node)
        return node.id

    def leaf(self, value):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("leaf value is not finite")
        return self._push("leaf", (), value, {})

    def const(self, value):
        value = np.array(value, dtype=np.float64)
        return self._push("const", (), value, {})

    def record(self, kind, inputs, **attrs):
        # raw arrays and numbers become constants
        inputs = [i if isinstance(i, (int, np.integer)) else self.const(i) for i in inputs]
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} is not on this tape")
        values = [self.nodes[i].value for i in inputs]
        return self._push(kind, inputs, _apply(kind, values, attrs), attrs)

    def value(self, node_id):
        if not isinstance(node_id, (int, np.integer)):
            return np.asarray(node_id, dtype=np.float64)
        return self.nodes[node_id].value

    def backward(self, loss_id):
        """Accumulate d(loss)/d(node) into every node's ``grad``.

        Returns ``{leaf_id: gradient}`` for every leaf (parameter) node;
        leaves the loss does not depend on get zeros.
        """
        loss = self.nodes[loss_id]
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss_id + 1]):
            if node.grad is None or not node.inputs:
                continue
            values = [self.nodes[i].value for i in node.inputs]
            parts = OPS[node.op].backward(node.grad, values, node.value, **node.attrs)
            for i, g in zip(node.inputs, parts):
                src = self.nodes[i]
                if src.op == "const":
                    continue
                src.grad = g.copy() if src.grad is None else src.grad + g
        grads = {}
        for node in self.nodes:
            if node.op == "leaf":
                if node.grad is None:
                    node.grad = np.zeros_like(node.value)
                grads[node.id] = node.grad
        return grads


class Eager(_OpMethods):
    """Evaluate ops immediately on arrays; nothing is recorded."""

    def leaf(self, value):
        return np.asarray(value, dtype=np.float64)

    const = leaf

    def record(self, kind, inputs, **attrs):
        return _apply(kind, [np.asarray(v, dtype=np.float64) for v in inputs], attrs)

    def value(self, x):
        return x


def grad_check(fn, point, eps=1e-5):
    """Compare tape gradients with central differences.

    ``fn(ops, x)`` builds a scalar from ``x`` using the op methods of
    ``ops`` (a :class:`Tape` or :class:`Eager`).  Returns the maximum over
    coordinates of ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    loss = fn(tape, x)
    analytic = tape.backward(loss)[x].ravel()

    eager = Eager()
    flat = point.ravel()
    worst = 0.0
    for k in range(flat.size):
        vals = []
        for step in (eps, -eps):
            shifted = flat.copy()
            shifted[k] += step
            try:
                v = float(np.asarray(fn(eager, shifted.reshape(point.shape))).reshape(()))
            except (NonFiniteError, ZeroNormError, FloatingPointError) as exc:
                raise GradCheckError(f"evaluation failed at coordinate {k}: {exc}", k) from exc
            if not np.isfinite(v):
                raise GradCheckError(f"non-finite evaluation at coordinate {k}", k)
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2 * eps)
        err = abs(analytic[k] - numeric) / max(1e-8, abs(analytic[k]) + abs(numeric))
        worst = max(worst, err)
    return worst
