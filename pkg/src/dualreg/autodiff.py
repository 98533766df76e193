"""Minimal reverse-mode differentiation over numpy arrays.

Every differentiable stage of the pipeline is written with the operations in
this module.  A forward pass records a graph of :class:`Var` nodes; calling
:func:`grad` walks it backwards once.  The graph object returned by a forward
call doubles as the "tape" that the public ``*_backward`` functions consume.

Non-smooth points use fixed subgradients: ``abs`` and ``norm`` have zero
gradient at zero, ``max`` routes to the first (lowest-index) maximiser.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Var", "const", "leaf", "grad", "value_of",
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "exp", "log",
    "tanh", "abs", "sqrt", "square", "leaky_relu", "amax", "softmax", "take",
    "concat", "stack", "reshape", "transpose", "cross", "norm", "atan2",
    "huber", "floor_min", "sparse_matmul", "custom",
]


class Var:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, value, parents: tuple = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or bool(parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def leaf(x, name: str | None = None) -> Var:
    """Wrap ``x`` as a differentiable input."""
    return Var(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _node(value, parents: Sequence[Var], backward_fn) -> Var:
    if not any(p.requires_grad for p in parents):
        return Var(value)
    return Var(value, tuple(parents), backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def grad(root: Var, wrt: Iterable[Var], seed=None) -> list[np.ndarray]:
    """Gradients of ``<seed, root>`` with respect to each of ``wrt``.

    ``seed`` defaults to ones (so a scalar root gives its plain gradient).
    Inputs that the root does not depend on receive zeros.
    """
    wrt = list(wrt)
    if seed is None:
        seed = np.ones_like(root.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.value.shape:
        raise ValueError(f"seed shape {seed.shape} != output shape {root.value.shape}")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        pg = node.backward_fn(g)
        for p, gp in zip(node.parents, pg):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    return [grads.get(id(v), np.zeros_like(v.value)) for v in wrt]


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Var:
    a, b = const(a), const(b)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)))


def neg(a) -> Var:
    a = const(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Var:
    a = const(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = const(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a) -> Var:
    a = const(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def abs(a) -> Var:  # noqa: A001
    a = const(a)
    return _node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def sqrt(a) -> Var:
    a = const(a)
    out = np.sqrt(a.value)
    safe = np.where(out > 0, out, 1.0)
    return _node(out, (a,), lambda g: (np.where(out > 0, g / (2.0 * safe), 0.0),))


def square(a) -> Var:
    a = const(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def leaky_relu(a, slope: float = 0.01) -> Var:
    a = const(a)
    scale = np.where(a.value > 0, 1.0, slope)
    return _node(a.value * scale, (a,), lambda g: (g * scale,))


def floor_min(a, floor: float) -> Var:
    """``max(a, floor)`` with zero gradient where the floor is active."""
    a = const(a)
    live = a.value > floor
    return _node(np.where(live, a.value, floor), (a,), lambda g: (g * live,))


def huber(a, beta: float) -> Var:
    """Elementwise Huber: x²/2 for |x| <= beta, else beta(|x| - beta/2)."""
    a = const(a)
    x = a.value
    small = np.abs(x) <= beta
    out = np.where(small, 0.5 * x * x, beta * (np.abs(x) - 0.5 * beta))
    return _node(out, (a,), lambda g: (g * np.where(small, x, beta * np.sign(x)),))


def atan2(y, x) -> Var:
    y, x = const(y), const(x)
    out = np.arctan2(y.value, x.value)
    r2 = y.value * y.value + x.value * x.value
    safe = np.where(r2 > 0, r2, 1.0)

    def back(g):
        live = r2 > 0
        return (_unbroadcast(np.where(live, g * x.value / safe, 0.0), y.shape),
                _unbroadcast(np.where(live, -g * y.value / safe, 0.0), x.shape))

    return _node(out, (y, x), back)


# ------------------------------------------------------------------ reductions

def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = const(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = const(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def amax(a, axis: int) -> Var:
    """Maximum along ``axis``; the gradient goes to the first maximiser only."""
    a = const(a)
    arg = np.argmax(a.value, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(a.value, arg_k, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, arg_k, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), back)


def softmax(a, axis: int = -1) -> Var:
    a = const(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back)


def norm(a, axis: int = -1, keepdims: bool = False) -> Var:
    """Euclidean norm along ``axis``; zero-length vectors get zero gradient."""
    a = const(a)
    n = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n if keepdims else n.squeeze(axis)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.where(n > 0, gk * a.value / safe, 0.0),)

    return _node(out, (a,), back)


# -------------------------------------------------------------------- linear

def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    out = a.value @ b.value

    def back(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
            gb = np.tensordot(av, g, axes=(list(range(av.ndim - 1)), list(range(g.ndim))))
            return (ga, gb)
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(out, (a, b), back)


def sparse_matmul(S: sp.spmatrix, a, side: str = "left") -> Var:
    """``S @ a`` (side='left') or ``a @ S`` (side='right') for constant sparse S."""
    a = const(a)
    if side == "left":
        out = np.asarray(S @ a.value)
        return _node(out, (a,), lambda g: (np.asarray(S.T @ g),))
    out = np.asarray((S.T @ a.value.T).T)
    return _node(out, (a,), lambda g: (np.asarray((S @ g.T).T),))


def cross(a, b) -> Var:
    a, b = const(a), const(b)
    out = np.cross(a.value, b.value)
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(np.cross(b.value, g), a.shape),
                            _unbroadcast(np.cross(g, a.value), b.shape)))


# --------------------------------------------------------------------- shape

def take(a, idx) -> Var:
    """``a[idx]`` for any numpy index; repeated indices accumulate gradients."""
    a = const(a)
    out = a.value[idx]

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), back)


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [const(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts: Sequence, axis: int = 0) -> Var:
    parts = [const(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)
    n = len(parts)
    return _node(out, tuple(parts),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def reshape(a, shape) -> Var:
    a = const(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Var:
    a = const(a)
    out = np.transpose(a.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


# -------------------------------------------------------------------- custom

def custom(inputs: Sequence, forward: Callable, backward: Callable) -> Var | tuple[Var, ...]:
    """Wrap a hand-differentiated primitive.

    ``forward(*values) -> (outputs, ctx)`` where outputs is an array or tuple
    of arrays; ``backward(ctx, *out_grads) -> tuple of input grads``.  Multi
    output primitives are split with one ``take``-free node per output that
    shares a single backward call.
    """
    inputs = [const(x) for x in inputs]
    outs, ctx = forward(*[x.value for x in inputs])
    single = not isinstance(outs, tuple)
    outs = (outs,) if single else outs
    if not any(x.requires_grad for x in inputs):
        res = tuple(Var(o) for o in outs)
        return res[0] if single else res

    packed = Var(np.zeros(1), tuple(inputs), None)
    holders: list[Var] = []

    def make_back(k):
        def back(g):
            return (_PackedGrad(k, g),)
        return back

    for k, o in enumerate(outs):
        holders.append(Var(o, (packed,), make_back(k)))

    def packed_back(g):
        gs = [np.zeros_like(o) for o in outs]
        for item in g.items:
            gs[item.k] = gs[item.k] + item.g
        return backward(ctx, *gs)

    packed.backward_fn = packed_back
    return holders[0] if single else tuple(holders)


class _PackedGrad:
    """Accumulator that lets several outputs of one primitive share a node."""

    __slots__ = ("items", "k", "g")

    def __init__(self, k, g):
        self.k, self.g = k, g
        self.items = [self]

    def __add__(self, other):
        out = _PackedGrad(self.k, self.g)
        out.items = self.items + other.items
        return out

    @property
    def value(self):  # pragma: no cover - debugging aid
        return [(i.k, i.g) for i in self.items]
