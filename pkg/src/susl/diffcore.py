"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op creates a new :class:`Tensor` and appends it to the active
:class:`Tape`. ``backward`` walks the tape in reverse creation order, which
is a valid reverse topological order because an op can only consume tensors
that already exist.

Typical use::

    with Tape() as tape:
        w = leaf(np.ones((3, 2)))
        loss = sum_(matmul(x, w))
        tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import threading

import numpy as np

LOG_FLOOR = 1e-10

_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "node_id")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.node_id = -1

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, so model code reads like the maths
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, t: Tensor):
        if self.consumed:
            raise TapeError("tape already replayed; build a new tape")
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def backward(self, loss: Tensor):
        if loss.values.size != 1 or loss.values.ndim > 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward already called on this tape")
        if loss.node_id < 0 or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id] is not loss:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if parent.node_id < 0:
                    # leaf: accumulate into its slot
                    parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor):
    tape = current_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


def leaf(values) -> Tensor:
    """A differentiable input (parameter or probe)."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def const(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


def _make(values, parents, backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape = current_tape()
        if tape is None:
            raise TapeError("differentiable op outside of an active Tape")
        tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- binary ops -------------------------------------------------------------


def matmul(a, b, rowwise=False) -> Tensor:
    """Matrix product. ``rowwise=True`` computes each output row on its own,
    so a row's result never depends on what else is in the batch (BLAS
    blocking otherwise changes the last bits)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    if rowwise:
        out = np.empty((av.shape[0], bv.shape[1]))
        for i in range(av.shape[0]):
            out[i] = av[i] @ bv
    else:
        out = av @ bv

    def bw(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _make(out, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def bias_add(x, b) -> Tensor:
    """Row-broadcast add of a bias vector ``b`` to ``x[batch, n]``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not fit {x.shape}")
    return add(x, b)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# --- unary ops --------------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, floor=LOG_FLOOR) -> Tensor:
    """Natural log with inputs floored at ``floor``; zero gradient below it."""
    a = as_tensor(a)
    v = a.values
    safe = np.maximum(v, floor)
    live = v > floor
    return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    v = a.values
    return _make(v * v, (a,), lambda g: (2.0 * g * v,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    v = a.values
    return _make(np.maximum(v, 0.0), (a,), lambda g: (g * (v > 0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def identity(a) -> Tensor:
    return as_tensor(a)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    v = a.values
    out = np.logaddexp(0.0, v)
    return _make(out, (a,), lambda g: (g * _sigmoid(v),))


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    v = a.values
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    v = a.values
    shifted = v - v.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# --- reductions -------------------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.values.size if axis is None else shape[axis]
    out = a.values.mean(axis=axis)  # same rounding as numpy's mean

    def bw(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), bw)


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "identity": identity,
}


def elementwise(kind: str, *inputs, **kw) -> Tensor:
    """Dispatch by name; handy for table-driven gradient tests."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "exp": exp, "log": log,
        "neg": neg, "negation": neg, "bias_add": bias_add, "broadcast-add-bias": bias_add,
        "relu": relu, "tanh": tanh, "softplus": softplus, "sigmoid": sigmoid,
        "softmax": softmax, "log_softmax": log_softmax, "square": square,
        "sum": sum_, "reduce-sum": sum_, "mean": mean, "reduce-mean": mean,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kw)


def numerical_grad(f, x: np.ndarray, step=1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` wrt array ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g
