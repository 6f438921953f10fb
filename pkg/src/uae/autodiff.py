"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Node` wraps an ``ndarray`` value and the list of parents it was
computed from, each paired with a vector-Jacobian product closure.  Nodes
receive a monotonically increasing ordinal at construction; since parents
always exist before their children, sorting by that ordinal gives a valid
topological order for the backward sweep.

Elementwise ops follow numpy broadcasting; gradients are summed back onto
the broadcast operand shape.
"""
import itertools

import numpy as np

from .errors import NonScalarRoot, ShapeMismatch

_ordinal = itertools.count()


class Node:
    __slots__ = ("value", "grad", "parents", "id", "name")

    __array_priority__ = 100.0  # make ndarray <op> Node dispatch to Node

    def __init__(self, value, parents=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.id = next(_ordinal)
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def constant(x):
    """Detached copy: same value, no gradient path."""
    return Node(np.array(value_of(x)))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    ])


def sub(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: -_unbroadcast(g, sb)),
    ])


def mul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(av * bv, [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(av / bv, [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ])


def neg(a):
    a = as_node(a)
    return Node(-a.value, [(a, lambda g: -g)])


def power(a, p):
    a = as_node(a)
    p = float(p)
    av = a.value
    return Node(av ** p, [(a, lambda g: g * p * av ** (p - 1.0))])


def square(a):
    a = as_node(a)
    av = a.value
    return Node(av * av, [(a, lambda g: 2.0 * g * av)])


def sqrt(a):
    a = as_node(a)
    out = np.sqrt(a.value)
    return Node(out, [(a, lambda g: 0.5 * g / out)])


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, [(a, lambda g: g * out)])


def log(a):
    a = as_node(a)
    av = a.value
    return Node(np.log(av), [(a, lambda g: g / av)])


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, [(a, lambda g: g * (1.0 - out * out))])


def leaky_relu(a, slope=0.01):
    a = as_node(a)
    scale = np.where(a.value > 0.0, 1.0, slope)
    return Node(a.value * scale, [(a, lambda g: g * scale)])


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for a constant floor; no gradient below it."""
    a = as_node(a)
    keep = a.value > floor
    return Node(np.where(keep, a.value, floor), [(a, lambda g: g * keep)])


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_node(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Node(out, [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def amax(a, axis=-1):
    """Maximum along ``axis``; the gradient goes to the first arg-max."""
    a = as_node(a)
    idx = np.argmax(a.value, axis=axis)
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis)
    out = np.squeeze(out, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return full

    return Node(out, [(a, vjp)])


def reshape(a, shape):
    a = as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def transpose(a):
    """Swap the last two axes."""
    a = as_node(a)
    return Node(np.swapaxes(a.value, -1, -2), [(a, lambda g: np.swapaxes(g, -1, -2))])


def getitem(a, idx):
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return Node(a.value[idx], [(a, vjp)])


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    parents = []
    for node, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]
        parents.append((node, vjp))
    return Node(np.concatenate([n.value for n in nodes], axis=axis), parents)


def stack(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    expanded = [reshape(n, np.expand_dims(n.value, axis).shape) for n in nodes]
    return concat(expanded, axis=axis)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    return Node(av @ bv, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)),
    ])


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def _reachable(root):
    seen = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        for parent, _ in node.parents:
            if parent.id not in seen:
                stack_.append(parent)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(root):
    """Accumulate d(root)/d(node) into ``node.grad`` for every node reachable
    from ``root``; returns ``{leaf: grad}`` for the parent-less nodes."""
    if root.value.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    order = _reachable(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    leaves = {}
    for node in order:
        g = node.grad
        if g is None:
            continue
        if not node.parents:
            leaves[node] = g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    return leaves


def grad_of(root, wrt):
    """Convenience: gradients of ``root`` w.r.t. each node in ``wrt``
    (zeros where a node is not on the graph)."""
    for node in wrt:
        node.grad = None
    backward(root)
    return [np.zeros_like(n.value) if n.grad is None else n.grad for n in wrt]
