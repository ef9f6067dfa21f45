"""Reverse-mode automatic differentiation on dense numpy arrays.

A Tensor records the op that produced it and a closure that maps the output
gradient to gradients of its parents. ``backward`` walks the recorded graph
in reverse topological order, writes fresh gradients into every leaf that
requires them and then releases the graph.
"""

from __future__ import annotations

import numpy as np

from ..errors import HolsteinError


class NonFiniteError(HolsteinError, FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def tanh(self):
        return tanh(self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data, parents, backward_fn, op):
    """Wrap an op output; only attaches the graph when some parent needs grads."""
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), back, "mul")


def tsum(a, axis=None):
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_result(np.sum(a.data, axis=axis), (a,), back, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


def tanh(a):
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def norm(a, axis):
    """Euclidean norm over ``axis``; the gradient at a zero vector is taken as zero."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)

    return make_result(n, (a,), back, "norm")


def reshape(a, shape):
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back, "stack")


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, grad=None):
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Gradients are overwritten, not accumulated. The graph is released once
    traversed so a second backward on the same loss raises.
    """
    if not loss.requires_grad:
        raise HolsteinError("backward called on a tensor that does not require grad")
    if not loss.is_leaf and loss._parents == ():
        raise HolsteinError("graph already released")
    if grad is None:
        if loss.data.size != 1:
            raise HolsteinError("backward needs an explicit gradient for non-scalar outputs")
        grad = np.ones_like(loss.data)
    order = _topo_order(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = _released


def _released(g):
    raise HolsteinError("graph already released")


def masked_norms(a, masks):
    """Per-sample Euclidean norms of ``a`` restricted to each mask.

    ``a`` is (B, ...) and ``masks`` is (M, ...) with 0/1 entries; the result
    is (B, M). Zero-norm entries get a zero gradient.
    """
    masks = np.asarray(masks, dtype=a.dtype)
    flat = a.data.reshape(a.shape[0], -1)
    mflat = masks.reshape(masks.shape[0], -1)
    n = np.sqrt((flat * flat) @ mflat.T)

    def back(g):
        scale = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)  # (B, M)
        return ((scale @ mflat) * flat).reshape(a.shape),

    return make_result(n, (a,), back, "masked_norms")
