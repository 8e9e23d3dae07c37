"""Reverse-mode autodiff over dense float64 numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional gradient accumulator.
Operations record their inputs and a vector-Jacobian product so that
:func:`backward` can propagate the gradient of a scalar loss to every
reachable tensor with ``requires_grad``.  Everything runs in float64; this
substrate trades throughput for check-ability.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array node in a dynamically recorded computation graph.

    ``grad`` is allocated lazily on the first backward pass and accumulates
    across passes until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # ---- graph plumbing -------------------------------------------------------


def make_node(data, parents, vjp) -> Tensor:
    """Create a graph node unless grad recording is off or no parent needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every reachable ``requires_grad`` tensor.

    ``loss`` must be a scalar (size-1) tensor.  Gradients accumulate into
    ``.grad``; repeated calls add up until the grads are zeroed.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor with requires_grad")

    # Iterative topological order (graphs here can be tens of thousands deep).
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # Leaf: accumulate into the persistent gradient buffer.
            # Interior nodes only carry gradients transiently.
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            # VJP outputs may alias each other (or views of g); stored arrays
            # are therefore never mutated in place.
            grads[id(p)] = pg if acc is None else acc + pg


# ---- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a python float (no gradient to the scalar)."""
    a = as_tensor(a)
    s = float(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,))


Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = lambda self: neg(self)


# ---- reductions and shape ops --------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return make_node(out, (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(tensors), vjp)


def narrow(a, axis, start, length) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    a = as_tensor(a)
    idx = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(a.ndim)
    )
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return make_node(out, (a,), vjp)


def pad_axis(a, axis, before, after) -> Tensor:
    """Zero-pad along one axis."""
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    idx = tuple(
        slice(before, before + a.shape[d]) if d == axis else slice(None)
        for d in range(a.ndim)
    )
    return make_node(out, (a,), lambda g: (g[idx],))


def index(a, key) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return make_node(out, (a,), vjp)


Tensor.__getitem__ = lambda self, key: index(self, key)
Tensor.sum = lambda self, axis=None, keepdims=False: tsum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None: tmean(self, axis)
Tensor.reshape = lambda self, shape: reshape(self, shape)


def weighted_sum(tensors, weights: Tensor) -> Tensor:
    """sum_i weights[i] * tensors[i] as a single graph node.

    ``weights`` is a 1-D tensor with one entry per summand; all summands
    share a shape.  Gradients flow to both the summands and the weights.
    """
    tensors = [as_tensor(t) for t in tensors]
    weights = as_tensor(weights)
    if weights.shape != (len(tensors),):
        raise ValueError(
            f"need {len(tensors)} weights, got shape {weights.shape}")
    w = weights.data
    out = w[0] * tensors[0].data
    for i in range(1, len(tensors)):
        out += w[i] * tensors[i].data

    def vjp(g):
        gw = np.array([np.vdot(g, t.data) for t in tensors])
        return tuple(w[i] * g for i in range(len(tensors))) + (gw,)

    return make_node(out, tuple(tensors) + (weights,), vjp)


def zeros_like(a: Tensor) -> Tensor:
    return Tensor(np.zeros_like(as_tensor(a).data))


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
