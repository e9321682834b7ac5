"""Define-by-run reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` values
together with a vector-Jacobian rule for each input.  ``Tape.backward`` then
walks the recorded nodes in strict reverse order of creation.  Because a node
can only be built from nodes that already exist, creation order is a valid
topological order and no graph sort is needed.

All values are float64 arrays.  Scalars are 0-d arrays.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value living on a tape."""

    __slots__ = ("tape", "idx", "value", "needs_grad")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray, needs_grad: bool):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(idx={self.idx}, shape={self.shape})"

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

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only operation record.

    With ``record=False`` operations still compute values but nothing is
    stored, so evaluation-only passes do not hold on to intermediates.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._parents: list[tuple[tuple[int, Callable], ...]] = []
        self._kinds: list[str] = []
        self._values: list[np.ndarray] = []
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _push(self, kind: str, value: np.ndarray, parents) -> Node:
        needs = self.record and any(p.needs_grad for p, _ in parents)
        idx = self._size
        self._size += 1
        if self.record:
            self._kinds.append(kind)
            self._values.append(value)
            self._parents.append(tuple((p.idx, fn) for p, fn in parents if p.needs_grad))
        return Node(self, idx, value, needs)

    def leaf(self, value, requires_grad: bool = True) -> Node:
        """Register an input.  Parameters should use ``requires_grad=True``."""
        arr = np.array(value, dtype=np.float64)
        idx = self._size
        self._size += 1
        if self.record:
            self._kinds.append("leaf")
            self._values.append(arr)
            self._parents.append(())
        return Node(self, idx, arr, requires_grad and self.record)

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def kinds(self) -> list[str]:
        return list(self._kinds)

    def backward(self, seed: Node) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``seed``; returns gradients by node index."""
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if seed.tape is not self:
            raise ValueError("seed node belongs to another tape")
        if seed.value.size != 1 or seed.value.ndim > 1:
            raise ShapeError(f"backward needs a scalar seed, got shape {seed.shape}")
        grads: dict[int, np.ndarray] = {seed.idx: np.ones_like(seed.value)}
        for idx in range(seed.idx, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            for pidx, fn in self._parents[idx]:
                contrib = fn(g)
                prev = grads.get(pidx)
                grads[pidx] = contrib if prev is None else prev + contrib
            if self._parents[idx]:
                del grads[idx]
        return grads

    def gradients(self, seed: Node, wrt: Mapping[str, Node]) -> dict[str, np.ndarray]:
        """Gradients of ``seed`` for named leaves; unused leaves get exact zeros."""
        grads = self.backward(seed)
        out = {}
        for name, node in wrt.items():
            g = grads.get(node.idx)
            out[name] = np.zeros_like(node.value) if g is None else np.array(g, dtype=np.float64)
        return out


# ---------------------------------------------------------------------------
# operand handling


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.const(x)


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return t._push("add", a.value + b.value,
                   [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return t._push("sub", a.value - b.value,
                   [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return t._push("mul", av * bv,
                   [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                    (b, lambda g: _unbroadcast(g * av, bv.shape))])


def div(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_broadcast(a.value, b.value, "div")
    av, bv = a.value, b.value
    out = av / bv
    return t._push("div", out,
                   [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                    (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))])


def neg(a: Node) -> Node:
    return a.tape._push("neg", -a.value, [(a, lambda g: -g)])


def matmul(a, b) -> Node:
    """Matrix product for 1-D/2-D operands (vector-matrix, matrix-matrix...)."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def ga(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.T

    def gb(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g) if bv.ndim == 2 else g * av
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return t._push("matmul", out, [(a, ga), (b, gb)])


# ---------------------------------------------------------------------------
# elementwise unary


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape._push("tanh", y, [(a, lambda g: g * (1.0 - y * y))])


def sigmoid(a: Node) -> Node:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape._push("sigmoid", y, [(a, lambda g: g * y * (1.0 - y))])


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return a.tape._push("exp", y, [(a, lambda g: g * y)])


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value")
    return a.tape._push("log", np.log(av), [(a, lambda g: g / av)])


def softplus(a: Node) -> Node:
    av = a.value
    y = np.logaddexp(0.0, av)
    return a.tape._push("softplus", y, [(a, lambda g: g * 0.5 * (1.0 + np.tanh(0.5 * av)))])


def square(a: Node) -> Node:
    av = a.value
    return a.tape._push("square", av * av, [(a, lambda g: 2.0 * g * av)])


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp; the gradient is zero where the clamp is active."""
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return a.tape._push("clip", np.clip(av, lo, hi), [(a, lambda g: g * inside)])


def dtanh_mul(y: Node, da) -> Node:
    """``(1 - y**2) * da``: tangent propagation through a tanh with output ``y``."""
    t = y.tape
    da = _lift(t, da)
    yv, dv = y.value, da.value
    d = 1.0 - yv * yv
    out = d * dv
    return t._push("dtanh_mul", out,
                   [(y, lambda g: _unbroadcast(-2.0 * g * yv * dv, yv.shape)),
                    (da, lambda g: _unbroadcast(g * d, dv.shape))])


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape._push("sum", np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), [(a, back)])


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def logsumexp(a: Node, axis=-1, keepdims: bool = False) -> Node:
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * np.exp(av - out_k)

    return a.tape._push("logsumexp", np.asarray(out), [(a, back)])


def log_softmax(a: Node, axis=-1) -> Node:
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True))
    out = av - lse
    p = np.exp(out)
    return a.tape._push("log_softmax", out,
                        [(a, lambda g: g - p * np.sum(g, axis=axis, keepdims=True))])


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return a.tape._push("reshape", a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def getitem(a: Node, key) -> Node:
    shape = a.shape

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return out

    return a.tape._push("getitem", np.array(a.value[key]), [(a, back)])


def concat(xs: Sequence, axis: int = -1) -> Node:
    t = _tape_of(*xs)
    nodes = [_lift(t, x) for x in xs]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    parents = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        def back(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        parents.append((n, back))
    return t._push("concat", out, parents)


# ---------------------------------------------------------------------------
# densities


def gaussian_log_pdf(x, mu, sigma=None, *, log_sigma=None) -> Node:
    """Elementwise ``log N(x; mu, sigma**2)``.

    Pass exactly one of ``sigma`` or ``log_sigma``.
    """
    if (sigma is None) == (log_sigma is None):
        raise ValueError("give exactly one of sigma / log_sigma")
    t = _tape_of(x, mu, sigma if sigma is not None else log_sigma)
    x, mu = _lift(t, x), _lift(t, mu)
    xv, mv = x.value, mu.value
    if sigma is not None:
        s = _lift(t, sigma)
        sv = s.value
        if np.any(sv <= 0):
            raise DomainError("gaussian_log_pdf needs sigma > 0")
        ls = np.log(sv)
    else:
        s = _lift(t, log_sigma)
        ls = s.value
        sv = np.exp(ls)
    for v in (mv, sv):
        _check_broadcast(xv, v, "gaussian_log_pdf")
    u = (xv - mv) / sv
    out = -0.5 * u * u - ls - 0.5 * LOG_2PI

    def gx(g):
        return _unbroadcast(-g * u / sv, xv.shape)

    def gm(g):
        return _unbroadcast(g * u / sv, mv.shape)

    if sigma is not None:
        def gs(g):
            return _unbroadcast(g * (u * u - 1.0) / sv, sv.shape)
    else:
        def gs(g):
            return _unbroadcast(g * (u * u - 1.0), ls.shape)

    return t._push("gaussian_log_pdf", out, [(x, gx), (mu, gm), (s, gs)])


def values(nodes: Iterable[Node]) -> list[np.ndarray]:
    return [n.value for n in nodes]
