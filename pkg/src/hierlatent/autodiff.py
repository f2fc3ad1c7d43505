"""A small reverse-mode differentiation engine over numpy arrays.

Each :class:`Var` holds a value and, for every input it was computed from,
a function mapping the output adjoint to that input's adjoint.  :func:`grad`
walks the graph once in reverse topological order.  Elementwise ops follow
numpy broadcasting; adjoints are summed back to the input shape.

Only the operations the learner needs are provided.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents")
    # make numpy operators defer to ours when a Var is on the right
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __rtruediv__(self, other):
        return mul(as_var(other), reciprocal(self))

    def __getitem__(self, key):
        return index(self, key)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Gradient
# --------------------------------------------------------------------------

def _topo(root: Var):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p, _ in v.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(root: Var, wrt, seed=None):
    """Adjoints of ``root`` with respect to each Var in ``wrt``.

    ``root`` must be a scalar unless ``seed`` (the output adjoint) is given.
    Inputs that ``root`` does not depend on get zero arrays.
    """
    if seed is None:
        if root.value.size != 1:
            raise ValueError("grad of a non-scalar needs an explicit seed")
        seed = np.ones_like(root.value)
    adj = {id(root): np.asarray(seed, dtype=np.float64)}
    for v in reversed(_topo(root)):
        g = adj.get(id(v))
        if g is None:
            continue
        for p, vjp in v.parents:
            contrib = vjp(g)
            if id(p) in adj:
                adj[id(p)] = adj[id(p)] + contrib
            else:
                adj[id(p)] = contrib
    return [adj.get(id(w), np.zeros_like(w.value)) for w in wrt]


# --------------------------------------------------------------------------
# Arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value,
               ((a, lambda g: _unbroadcast(g, a.shape)),
                (b, lambda g: _unbroadcast(g, b.shape))))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av * bv,
               ((a, lambda g: _unbroadcast(g * bv, a.shape)),
                (b, lambda g: _unbroadcast(g * av, b.shape))))


def neg(a) -> Var:
    return Var(-a.value, ((a, lambda g: -g),))


def reciprocal(a) -> Var:
    out = 1.0 / a.value
    return Var(out, ((a, lambda g: -g * out * out),))


def matmul(a, b) -> Var:
    """``a @ b`` for arrays of rank >= 2 with matching batch dimensions."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av @ bv,
               ((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)),
                (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape))))


def einsum(spec: str, a, b) -> Var:
    """Two-operand einsum without repeated indices inside an operand.

    Every index of an operand must appear in the other operand or the output.
    """
    a, b = as_var(a), as_var(b)
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    av, bv = a.value, b.value
    return Var(np.einsum(spec, av, bv),
               ((a, lambda g: np.einsum(f"{out},{sb}->{sa}", g, bv)),
                (b, lambda g: np.einsum(f"{out},{sa}->{sb}", g, av))))


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------

def exp(a) -> Var:
    out = np.exp(a.value)
    return Var(out, ((a, lambda g: g * out),))


def log(a) -> Var:
    av = a.value
    return Var(np.log(av), ((a, lambda g: g / av),))


def square(a) -> Var:
    av = a.value
    return Var(av * av, ((a, lambda g: 2.0 * g * av),))


def tanh(a) -> Var:
    out = np.tanh(a.value)
    return Var(out, ((a, lambda g: g * (1.0 - out * out)),))


def sigmoid(a) -> Var:
    out = _sigmoid(a.value)
    return Var(out, ((a, lambda g: g * out * (1.0 - out)),))


def relu(a) -> Var:
    on = a.value > 0
    return Var(np.where(on, a.value, 0.0), ((a, lambda g: g * on),))


def leaky_relu(a, slope: float = 0.2) -> Var:
    d = np.where(a.value > 0, 1.0, slope)
    return Var(a.value * d, ((a, lambda g: g * d),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# --------------------------------------------------------------------------
# Reductions and shape
# --------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),))


def mean(a, axis=None, keepdims: bool = False) -> Var:
    count = a.value.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / count)


def logsumexp(a, axis, keepdims: bool = False) -> Var:
    av = a.value
    top = av.max(axis=axis, keepdims=True)
    w = np.exp(av - top)
    s = w.sum(axis=axis, keepdims=True)
    out = np.log(s) + top
    soft = w / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * soft

    return Var(out if keepdims else np.squeeze(out, axis=axis), ((a, vjp),))


def reshape(a, shape) -> Var:
    old = a.shape
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),))


def swapaxes(a, i: int, j: int) -> Var:
    return Var(np.swapaxes(a.value, i, j), ((a, lambda g: np.swapaxes(g, i, j)),))


def expand_dims(a, axis) -> Var:
    return Var(np.expand_dims(a.value, axis), ((a, lambda g: np.squeeze(g, axis=axis)),))


def index(a, key) -> Var:
    """Basic or advanced indexing; repeated indices accumulate."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return out

    return Var(a.value[key], ((a, vjp),))


def take_along(a, idx: np.ndarray, axis: int) -> Var:
    """``np.take_along_axis`` with an integer index array of the same rank."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[axis] = idx
        np.add.at(out, tuple(grids), g)
        return out

    return Var(np.take_along_axis(a.value, idx, axis), ((a, vjp),))


def concat(parts, axis: int) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def make(k):
        return lambda g: np.split(g, sizes, axis=axis)[k]

    return Var(np.concatenate([p.value for p in parts], axis=axis),
               tuple((p, make(k)) for k, p in enumerate(parts)))


def prod_except(a, axis: int) -> Var:
    """``out[..., i, ...] = prod_{j != i} a[..., j, ...]`` along ``axis``.

    Computed by leaving each entry out in turn, so zeros in ``a`` are exact.
    """
    av = np.moveaxis(a.value, axis, 0)
    k = av.shape[0]
    out = np.empty_like(av)
    for i in range(k):
        out[i] = np.prod(np.delete(av, i, axis=0), axis=0)

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        res = np.zeros_like(av)
        for i in range(k):
            for m in range(k):
                if m == i:
                    continue
                others = np.delete(av, [i, m], axis=0)
                res[m] += g[i] * np.prod(others, axis=0)
        return np.moveaxis(res, 0, axis)

    return Var(np.moveaxis(out, 0, axis), ((a, vjp),))
