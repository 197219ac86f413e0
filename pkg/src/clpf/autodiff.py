"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: a :class:`Tape` is created per forward pass and
records one node per primitive operation.  Every primitive checks its output
for NaN/Inf and raises :class:`NonFiniteError` instead of propagating, because
the downstream log-weight accumulations would otherwise silently poison an
entire training step.

All primitives accept plain numpy arrays as well as :class:`Tensor` inputs.
When no input carries a tape the operation runs untracked and returns a bare
``np.ndarray``, which makes evaluation-only code paths (validation, oracles,
finite differences) cheap.
"""

from __future__ import annotations

import math

import numpy as np


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Parents always precede children, so a single reverse sweep visits each
    node exactly once.  A tape is single-owner: it must not be shared between
    concurrent forward passes.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list = []

    def __len__(self) -> int:
        return len(self._parents)

    def _add(self, parents: tuple[int, ...], vjp) -> int:
        self._parents.append(parents)
        self._vjps.append(vjp)
        return len(self._parents) - 1

    def leaf(self, value) -> "Tensor":
        """Record an input node (no parents); gradients accumulate here."""
        value = _check_finite(np.asarray(value, dtype=np.float64))
        return Tensor(value, self, self._add((), None))


class Tensor:
    """A float64 array plus an optional handle into the active tape."""

    __slots__ = ("value", "tape", "node_id")

    # make ndarray <op> Tensor defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, tape: Tape | None = None, node_id: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor({self.value!r})"

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
        return take(self, key)


def value_of(x) -> np.ndarray:
    """Underlying array of a Tensor, or the input coerced to float64."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _check_finite(value: np.ndarray) -> np.ndarray:
    # a finite sum implies all-finite elements short of ~1e308 overflow; the
    # slower elementwise scan only runs to confirm a suspected violation
    if not math.isfinite(value.sum()):
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("non-finite value produced by primitive")
    return value


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            if tape is not None and tape is not a.tape:
                raise ValueError("inputs recorded on different tapes")
            tape = a.tape
    return tape


def _record(tape, value, inputs, vjp):
    """Wrap a raw result; record on the tape if any input is tracked."""
    value = _check_finite(np.asarray(value, dtype=np.float64))
    if tape is None:
        return value
    parents = tuple(
        a.node_id for a in inputs if isinstance(a, Tensor) and a.node_id is not None
    )
    return Tensor(value, tape, tape._add(parents, vjp))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# binary arithmetic


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def vjp(g):
        parts = []
        if isinstance(a, Tensor) and a.node_id is not None:
            parts.append(_unbroadcast(g, av.shape))
        if isinstance(b, Tensor) and b.node_id is not None:
            parts.append(_unbroadcast(g, bv.shape))
        return parts

    return _record(tape, out, (a, b), vjp)


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av - bv

    def vjp(g):
        parts = []
        if isinstance(a, Tensor) and a.node_id is not None:
            parts.append(_unbroadcast(g, av.shape))
        if isinstance(b, Tensor) and b.node_id is not None:
            parts.append(_unbroadcast(-g, bv.shape))
        return parts

    return _record(tape, out, (a, b), vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def vjp(g):
        parts = []
        if isinstance(a, Tensor) and a.node_id is not None:
            parts.append(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor) and b.node_id is not None:
            parts.append(_unbroadcast(g * av, bv.shape))
        return parts

    return _record(tape, out, (a, b), vjp)


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if np.any(bv == 0.0):
        raise ZeroDivisionError("division by zero in primitive")
    out = av / bv

    def vjp(g):
        parts = []
        if isinstance(a, Tensor) and a.node_id is not None:
            parts.append(_unbroadcast(g / bv, av.shape))
        if isinstance(b, Tensor) and b.node_id is not None:
            parts.append(_unbroadcast(-g * av / (bv * bv), bv.shape))
        return parts

    return _record(tape, out, (a, b), vjp)


def neg(a):
    tape = _tape_of(a)
    out = -value_of(a)
    return _record(tape, out, (a,), lambda g: [-g])


def matmul(a, b):
    """Matrix product for 1-D/2-D operands (numpy semantics)."""
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv

    def vjp(g):
        parts = []
        if isinstance(a, Tensor) and a.node_id is not None:
            if av.ndim == 1 and bv.ndim == 2:
                parts.append(bv @ g)
            elif av.ndim == 2 and bv.ndim == 1:
                parts.append(np.outer(g, bv))
            elif av.ndim == 1 and bv.ndim == 1:
                parts.append(g * bv)
            else:
                parts.append(np.atleast_2d(g) @ bv.T if bv.ndim == 2 else g @ bv.T)
        if isinstance(b, Tensor) and b.node_id is not None:
            if av.ndim == 1 and bv.ndim == 2:
                parts.append(np.outer(av, g))
            elif av.ndim == 2 and bv.ndim == 1:
                parts.append(av.T @ g)
            elif av.ndim == 1 and bv.ndim == 1:
                parts.append(g * av)
            else:
                parts.append(av.T @ np.atleast_2d(g) if av.ndim == 2 else av.T @ g)
        return parts

    return _record(tape, out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None):
    tape = _tape_of(a)
    av = value_of(a)
    out = av.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return [np.broadcast_to(g, av.shape).copy()]
        return [np.broadcast_to(np.expand_dims(g, axis), av.shape).copy()]

    return _record(tape, out, (a,), vjp)


def mean_(a, axis=None):
    tape = _tape_of(a)
    av = value_of(a)
    out = av.mean(axis=axis)
    n = av.size if axis is None else av.shape[axis]

    def vjp(g):
        if axis is None:
            return [np.broadcast_to(g / n, av.shape).copy()]
        return [np.broadcast_to(np.expand_dims(g / n, axis), av.shape).copy()]

    return _record(tape, out, (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a):
    tape = _tape_of(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(value_of(a))
    return _record(tape, out, (a,), lambda g: [g * out])


def log(a):
    tape = _tape_of(a)
    av = value_of(a)
    if np.any(av <= 0.0):
        raise ValueError("log of non-positive value")
    out = np.log(av)
    return _record(tape, out, (a,), lambda g: [g / av])


def sqrt(a):
    tape = _tape_of(a)
    av = value_of(a)
    if np.any(av <= 0.0):
        raise ValueError("sqrt of non-positive value")
    out = np.sqrt(av)
    return _record(tape, out, (a,), lambda g: [g * 0.5 / out])


def tanh(a):
    tape = _tape_of(a)
    out = np.tanh(value_of(a))
    return _record(tape, out, (a,), lambda g: [g * (1.0 - out * out)])


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    tape = _tape_of(a)
    out = _expit(np.atleast_1d(value_of(a)).copy()).reshape(value_of(a).shape)
    return _record(tape, out, (a,), lambda g: [g * out * (1.0 - out)])


def softplus(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    sig = _expit(np.atleast_1d(av).copy()).reshape(av.shape)
    return _record(tape, out, (a,), lambda g: [g * sig])


def square(a):
    tape = _tape_of(a)
    av = value_of(a)
    return _record(tape, av * av, (a,), lambda g: [g * 2.0 * av])


def clip(a, lo: float, hi: float):
    """Hard clip with pass-through gradient strictly inside [lo, hi]."""
    tape = _tape_of(a)
    av = value_of(a)
    out = np.clip(av, lo, hi)
    mask = (av > lo) & (av < hi)
    return _record(tape, out, (a,), lambda g: [g * mask])


# ---------------------------------------------------------------------------
# shape manipulation


def concat(parts, axis=-1):
    parts = list(parts)
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return [
            pieces[i]
            for i, p in enumerate(parts)
            if isinstance(p, Tensor) and p.node_id is not None
        ]

    return _record(tape, out, tuple(parts), vjp)


def take(a, key):
    """Basic indexing (the 'slice' primitive); gradient scatter-adds."""
    tape = _tape_of(a)
    av = value_of(a)
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return [full]

    return _record(tape, out, (a,), vjp)


def broadcast_to(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.broadcast_to(av, shape).copy()
    return _record(tape, out, (a,), lambda g: [_unbroadcast(g, av.shape)])


def stack(parts, axis=0):
    parts = list(parts)
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        pieces = np.moveaxis(g, axis, 0)
        return [
            pieces[i]
            for i, p in enumerate(parts)
            if isinstance(p, Tensor) and p.node_id is not None
        ]

    return _record(tape, out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# dispatch, backward pass, finite differences

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "sum": sum_,
    "mean": mean_,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "square": square,
    "sqrt": sqrt,
    "concat": concat,
    "slice": take,
    "broadcast": broadcast_to,
    "clip": clip,
}


def apply_primitive(op_kind: str, *inputs, **kwargs):
    """Apply a primitive by name; records on the active tape of the inputs."""
    if op_kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op_kind!r}")
    if op_kind == "concat":
        return concat(inputs[0] if len(inputs) == 1 else list(inputs), **kwargs)
    return _PRIMITIVES[op_kind](*inputs, **kwargs)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns {node_id: gradient array}."""
    if not isinstance(root, Tensor) or root.tape is not tape or root.node_id is None:
        raise ValueError("root is not recorded on this tape")
    if root.size != 1:
        raise ValueError("backward requires a scalar root")
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[root.node_id] = np.ones_like(root.value)
    for nid in range(root.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        vjp = tape._vjps[nid]
        if vjp is None:
            continue
        parent_grads = vjp(g)
        for pid, pg in zip(tape._parents[nid], parent_grads):
            pg = np.asarray(pg, dtype=np.float64)
            if grads[pid] is None:
                grads[pid] = pg.copy() if pg.base is not None else pg
            else:
                grads[pid] = grads[pid] + pg
    return {nid: g for nid, g in enumerate(grads) if g is not None}


def finite_diff_grad(f, point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=np.float64)
    grad = np.empty_like(point)
    flat = point.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(point))
        flat[i] = orig - h
        fm = float(f(point))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite function value in finite differences")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
