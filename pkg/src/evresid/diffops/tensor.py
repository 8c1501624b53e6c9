"""Reverse-mode differentiation over a dynamically recorded graph of numpy arrays."""
from __future__ import annotations

import contextlib

import numpy as np

_state = {"grad": True, "debug": False}


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_debug(flag: bool):
    """When on, every op asserts its output is finite."""
    _state["debug"] = bool(flag)


def is_grad_enabled():
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        a = np.asarray(data)
        if a.dtype.kind != "f":
            a = a.astype(np.float64)
        self.data = a
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad=None, free_graph=True):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        With ``free_graph`` the interior nodes drop their closures and gradients
        afterwards so the graph can be collected.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype) if self.grad is None else self.grad + grad
        for node in reversed(order):
            fn = node._backward
            if fn is None or node.grad is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    g = _unbroadcast(g, parent.data.shape)
                parent.grad = g if parent.grad is None else parent.grad + g
            if free_graph:
                node.grad = None
                node._backward = None
                node._parents = ()

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return div(self, o)
        return mul(self, 1.0 / o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make(data, parents, backward):
    """Wrap an op result, recording ``backward`` when any parent needs a gradient."""
    out = Tensor(data)
    if _state["debug"] and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values produced")
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _pair(a, b)
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b), lambda g: (g * bd if a.requires_grad else None,
                                            g * ad if b.requires_grad else None))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make(ad / bd, (a, b), lambda g: (g / bd if a.requires_grad else None,
                                            -g * ad / (bd * bd) if b.requires_grad else None))


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,))


def relu(a):
    mask = a.data > 0
    return make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def tanh(a):
    y = np.tanh(a.data)
    return make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    x = a.data
    # split form keeps exp() from overflowing for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.data)
    return make(y, (a,), lambda g: (g * y,))


def abs_(a):
    s = np.sign(a.data)
    return make(np.abs(a.data), (a,), lambda g: (g * s,))


def square(a):
    x = a.data
    return make(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a):
    y = np.sqrt(a.data)
    return make(y, (a,), lambda g: (g * 0.5 / y,))


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make(ad @ bd, (a, b), lambda g: (g @ bd.T if a.requires_grad else None,
                                            ad.T @ g if b.requires_grad else None))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), back)


def reshape(a, shape):
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return make(a.data[idx], (a,), back)


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def split(a, sizes, axis=0):
    """Split along ``axis`` into pieces of the given sizes."""
    out, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(sl)))
        start += s
    if start != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    return out


def _pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return Tensor(a), Tensor(b)
