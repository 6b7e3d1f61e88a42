"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive returns a :class:`Value` that remembers its parents and a
vector-Jacobian product.  :func:`gradient` linearizes the graph reachable from
a scalar output into a :class:`Tape` (topological order) and replays adjoints
in reverse.  Only first-order derivatives are supported.

Broadcasting follows numpy rules; adjoints are summed back to operand shapes.
Non-differentiable points use the subgradient 0 (``abs``, ``sqrt`` at 0) and
``minimum``/``maximum`` send ties to the first operand.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes rejected by a primitive."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Value:
    """An n-dimensional float64 array node in a differentiable computation."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, parents=(), vjp=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Value, ...] = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Value(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x) -> Value:
    """Detach: same data, no gradient path."""
    return Value(x.data if isinstance(x, Value) else x)


def _make(data, parents: Sequence[Value], vjp, op: str) -> Value:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Value(data, op=op)
    return Value(data, True, parents=tuple(parents), vjp=vjp, op=op)


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


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast shapes {', '.join(map(str, shapes))}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def neg(a) -> Value:
    a = as_value(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Value:
    a = as_value(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def log1p(a) -> Value:
    a = as_value(a)
    ad = a.data
    return _make(np.log1p(ad), (a,), lambda g: (g / (1.0 + ad),), "log1p")


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Value:
    a = as_value(a)
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Value:
    """log(1 + exp(x)), overflow-free."""
    a = as_value(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = _sigmoid(np.atleast_1d(ad)).reshape(ad.shape)
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def sqrt(a) -> Value:
    a = as_value(a)
    out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _make(out, (a,), vjp, "sqrt")


def abs_(a) -> Value:
    a = as_value(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def power(a, exponent: float) -> Value:
    a = as_value(a)
    if isinstance(exponent, Value):
        raise ShapeError("power", "exponent must be a python scalar")
    ad = a.data
    p = float(exponent)
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def square(a) -> Value:
    a = as_value(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def minimum(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("minimum", a.shape, b.shape)
    take_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
        "minimum",
    )


def maximum(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("maximum", a.shape, b.shape)
    take_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
        "maximum",
    )


def clip(a, lo: float, hi: float) -> Value:
    return minimum(maximum(a, lo), hi)


def rodrigues_coefficients(angle_sq) -> tuple[Value, Value]:
    """Return (sin x / x, (1 - cos x) / x**2) as smooth functions of x**2.

    Both are entire functions of x**2, so they stay differentiable at the
    zero rotation where the naive formulas divide by zero.
    """
    a = as_value(angle_sq)
    x2 = a.data
    small = x2 < 1e-6
    safe = np.where(small, 1.0, x2)
    x = np.sqrt(safe)
    s, c = np.sin(x), np.cos(x)
    # series to third order in x**2 below the switch point
    ca = np.where(small, 1.0 - x2 / 6.0 + x2 * x2 / 120.0, s / x)
    cb = np.where(small, 0.5 - x2 / 24.0 + x2 * x2 / 720.0, (1.0 - c) / safe)
    # derivatives with respect to x**2
    da = np.where(small, -1.0 / 6.0 + x2 / 60.0, (c - s / x) / (2.0 * safe))
    db = np.where(small, -1.0 / 24.0 + x2 / 360.0, (x * s - 2.0 * (1.0 - c)) / (2.0 * safe * safe))
    return (
        _make(ca, (a,), lambda g: (g * da,), "sinc"),
        _make(cb, (a,), lambda g: (g * db,), "cosc"),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul", "operands must have at least one dimension")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = np.asarray(g)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        ga = G @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ G
        if ad.ndim == 1:
            ga = ga.squeeze(-2)
        if bd.ndim == 1:
            gb = gb.squeeze(-1)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), vjp, "matmul")


def cross(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError("cross", f"last axis must be 3, got {a.shape} and {b.shape}")
    _broadcast_shape("cross", a.shape, b.shape)
    ad, bd = a.data, b.data
    # d(a x b) with upstream g: grad_a = b x g, grad_b = g x a
    return _make(
        np.cross(ad, bd),
        (a, b),
        lambda g: (_unbroadcast(np.cross(bd, g), ad.shape), _unbroadcast(np.cross(g, ad), bd.shape)),
        "cross",
    )


def normalize(a, axis: int = -1) -> Value:
    """a / ||a|| along ``axis``."""
    a = as_value(a)
    ad = a.data
    n = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    u = ad / n

    def vjp(g):
        return ((g - u * np.sum(g * u, axis=axis, keepdims=True)) / n,)

    return _make(u, (a,), vjp, "normalize")


# ---------------------------------------------------------------- shape


def reshape(a, shape) -> Value:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    sa = a.shape
    return _make(out, (a,), lambda g: (g.reshape(sa),), "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Value:
    a = as_value(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def transpose(a, axes: Sequence[int]) -> Value:
    a = as_value(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand_dims(a, axis: int) -> Value:
    a = as_value(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape) -> Value:
    a = as_value(a)
    _broadcast_shape("broadcast_to", a.shape, tuple(shape))
    sa = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, sa),), "broadcast_to")


def concat(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    if not vals:
        raise ShapeError("concat", "nothing to concatenate")
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, tuple(vals), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    if not vals:
        raise ShapeError("stack", "nothing to stack")
    if len({v.shape for v in vals}) != 1:
        raise ShapeError("stack", f"shapes differ: {[v.shape for v in vals]}")
    out = np.stack([v.data for v in vals], axis=axis)
    n = len(vals)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(out, tuple(vals), vjp, "stack")


def getitem(a, index) -> Value:
    """Slice or gather.  Repeated gather indices accumulate in the adjoint."""
    a = as_value(a)
    if isinstance(index, Value):
        raise ShapeError("getitem", "index must not be a Value")
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("getitem", str(exc)) from None
    sa = a.shape

    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros(sa, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), vjp, "getitem")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    sa = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, sa).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def amin(a, axis: int = -1) -> Value:
    """Minimum along an axis; the gradient goes to the first minimizer."""
    return _extreme(a, axis, np.argmin, "amin")


def amax(a, axis: int = -1) -> Value:
    """Maximum along an axis; the gradient goes to the first maximizer."""
    return _extreme(a, axis, np.argmax, "amax")


def _extreme(a, axis, argf, op) -> Value:
    a = as_value(a)
    if a.shape[axis] == 0:
        raise ShapeError(op, "empty reduction axis")
    idx = np.expand_dims(argf(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)
    sa = a.shape

    def vjp(g):
        full = np.zeros(sa, dtype=DTYPE)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), vjp, op)


# ---------------------------------------------------------------- composites


def norm(a, axis: int = -1) -> Value:
    """Euclidean norm along ``axis`` with subgradient 0 at the origin."""
    return sqrt(sum_(square(a), axis=axis))


def custom(data, parents: Sequence[Value], vjp: Callable, op: str) -> Value:
    """Register a fused primitive whose adjoint the caller supplies."""
    return _make(data, tuple(as_value(p) for p in parents), vjp, op)


# ---------------------------------------------------------------- backward


class Tape:
    """Topologically ordered record of the nodes that produced an output."""

    def __init__(self, nodes: list[Value]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Value) -> "Tape":
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: np.ndarray | float = 1.0) -> dict[int, np.ndarray]:
        """Replay adjoints in reverse order; returns id(node) -> gradient."""
        out = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(out): np.broadcast_to(np.asarray(seed, DTYPE), out.shape).copy()}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def gradient(output: Value, inputs: Iterable[Value]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` with respect to ``inputs``.

    Inputs that do not influence the output receive zero arrays.
    """
    inputs = list(inputs)
    if output.size != 1:
        raise ShapeError("gradient", f"output must be scalar, got shape {output.shape}")
    for x in inputs:
        if not x.requires_grad:
            raise ValueError("gradient: every input must be created with requires_grad=True")
    if not output.requires_grad:
        return [np.zeros(x.shape, dtype=DTYPE) for x in inputs]
    grads = Tape.record(output).backward()
    return [np.array(grads.get(id(x), np.zeros(x.shape, dtype=DTYPE)), dtype=DTYPE).reshape(x.shape) for x in inputs]


def value_and_grad(fn: Callable[[Value], Value]) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Wrap a scalar function of one Value into ``x -> (f(x), df/dx)``."""

    def wrapped(x: np.ndarray) -> tuple[float, np.ndarray]:
        v = Value(np.array(x, dtype=DTYPE), requires_grad=True)
        out = fn(v)
        (g,) = gradient(out, [v])
        return float(out.data), g

    return wrapped


def check_gradient(fn: Callable[[Value], Value], point, step: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Central differences are meaningless across kinks; probe smooth points.
    """
    if step <= 0:
        raise ValueError("check_gradient: step must be positive")
    x0 = np.array(point, dtype=DTYPE)
    f0, g = value_and_grad(fn)(x0)
    if not np.isfinite(f0):
        raise FloatingPointError("check_gradient: function value is not finite")
    flat = x0.reshape(-1)
    num = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(fn(Value(xp.reshape(x0.shape))).data)
        fm = float(fn(Value(xm.reshape(x0.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("check_gradient: function value is not finite near the point")
        num[i] = (fp - fm) / (2.0 * step)
    a = g.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - num) / np.maximum(1.0, np.abs(a))))
