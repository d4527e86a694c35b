"""Dense float64 numerics with a minimal reverse-mode tape.

Every operation here is polymorphic: given plain ``numpy`` arrays it returns a
plain array, and given at least one :class:`Var` it records a node on that
variable's :class:`Tape` and returns a new :class:`Var`. The same loss code
therefore serves both the value-only path (finite differences, evaluation) and
the differentiable path (training).

Arrays may carry leading batch axes; ``matmul`` follows numpy's batched
semantics and gradients are summed back over broadcast axes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

Matrix = np.ndarray


def as_matrix(x, *, ndim: int | None = 2) -> Matrix:
    """Coerce ``x`` to a finite float64 array, optionally checking its rank."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError("matrix contains NaN or Inf")
    return arr


class Tape:
    """Append-only record of primitive operations.

    Nodes are stored in creation order, so a node's inputs always precede it.
    One tape per worker; it is not thread-safe.
    """

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._parents: list[tuple] = []
        self._vjps: list[Callable | None] = []
        self._leaves: dict[int, Var] = {}

    def __len__(self) -> int:
        return len(self._values)

    def leaf(self, value) -> "Var":
        """Register a tracked input (a parameter to differentiate against)."""
        v = self._push(np.array(value, dtype=np.float64), (), None)
        self._leaves[v.index] = v
        return v

    def record(self, value, parents: tuple, vjp: Callable) -> "Var":
        """Append a derived node.

        ``vjp(g)`` must return one gradient (or ``None``) per entry of
        ``parents``; entries that are not :class:`Var` are ignored.
        """
        return self._push(value, parents, vjp)

    def _push(self, value, parents, vjp) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value produced at tape node {len(self._values)}")
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, len(self._values) - 1, value)


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: Tape, index: int, value: np.ndarray) -> None:
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.value.shape})"

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


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, out, grad_a, grad_b):
    tape = _tape_of(a, b)
    if tape is None:
        return out
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        ga = _unbroadcast(grad_a(g), av.shape) if isinstance(a, Var) else None
        gb = _unbroadcast(grad_b(g), bv.shape) if isinstance(b, Var) else None
        return ga, gb

    return tape.record(out, (a, b), vjp)


def _unary(x, out, grad):
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (grad(g),))


# -- elementwise -----------------------------------------------------------------

def add(a, b):
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(x):
    return _unary(x, -value_of(x), lambda g: -g)


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xv = value_of(x)
    return _unary(x, np.log(xv), lambda g: g / xv)


def tanh(x):
    out = np.tanh(value_of(x))
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def sqrt(x):
    out = np.sqrt(value_of(x))
    return _unary(x, out, lambda g: g * 0.5 / out)


def square(x):
    xv = value_of(x)
    return _unary(x, xv * xv, lambda g: 2.0 * g * xv)


# -- shape and reductions ----------------------------------------------------------

def matmul(a, b):
    """Matrix product; batched over leading axes like ``numpy.matmul``."""
    av, bv = value_of(a), value_of(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    k_a = av.shape[-1]
    k_b = bv.shape[-2] if bv.ndim >= 2 else bv.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul dimension mismatch: {av.shape} x {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    if av.ndim < 2 or bv.ndim < 2:
        # promote vectors to matrices and let the batched rule handle them
        a2 = reshape(a, (1, -1)) if av.ndim == 1 else a
        b2 = reshape(b, (-1, 1)) if bv.ndim == 1 else b
        return reshape(matmul(a2, b2), out.shape)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if isinstance(a, Var) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if isinstance(b, Var) else None
        return ga, gb

    return tape.record(out, (a, b), vjp)


def transpose(x):
    """Swap the last two axes."""
    return _unary(x, np.swapaxes(value_of(x), -1, -2), lambda g: np.swapaxes(g, -1, -2))


def reshape(x, shape):
    xv = value_of(x)
    return _unary(x, xv.reshape(shape), lambda g: g.reshape(xv.shape))


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _unary(x, out, grad)


def mean(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    count = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def getitem(x, key):
    xv = value_of(x)
    out = xv[key]

    def grad(g):
        full = np.zeros_like(xv)
        np.add.at(full, key, g)
        return full

    return _unary(x, out, grad)


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if isinstance(x, Var) else None for p, x in zip(parts, xs))

    return tape.record(out, tuple(xs), vjp)


# -- softmax family ----------------------------------------------------------------

def _masked_lse(z: np.ndarray, mask):
    if mask is None:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
    else:
        zm = np.where(mask, z, -np.inf)
        m = zm.max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ShapeError("softmax mask leaves a row with no entries")
        e = np.where(mask, np.exp(zm - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return m + np.log(s), e / s


def logsumexp(x, temperature: float = 1.0, mask=None):
    """Stable log-sum-exp of ``x / temperature`` over the last axis.

    ``mask`` (boolean, broadcastable) selects the entries that participate.
    """
    xv = value_of(x)
    if xv.ndim == 0 or xv.shape[-1] == 0:
        raise ShapeError("logsumexp of an empty row")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    lse, probs = _masked_lse(xv / temperature, mask)
    return _unary(x, lse[..., 0], lambda g: g[..., None] * probs / temperature)


def log_softmax(x, temperature: float = 1.0, mask=None):
    """Row-wise ``x/T - logsumexp(x/T)`` over the last axis.

    Entries excluded by ``mask`` are returned as 0 and receive no gradient, so
    the result is finite everywhere and safe to multiply by constant weights.
    """
    xv = value_of(x)
    if xv.ndim == 0 or xv.shape[-1] == 0:
        raise ShapeError("log_softmax of an empty row")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = xv / temperature
    lse, probs = _masked_lse(z, mask)
    out = z - lse
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def grad(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - probs * g.sum(axis=-1, keepdims=True)) / temperature

    return _unary(x, out, grad)


def softmax(x, temperature: float = 1.0, mask=None):
    out = exp(log_softmax(x, temperature, mask))
    if mask is not None:
        out = mul(out, np.asarray(mask, dtype=np.float64))
    return out


# -- differentiation ----------------------------------------------------------------

def backward(output: Var) -> dict[Var, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to every leaf on its tape.

    Leaves the output does not depend on get zero gradients.
    """
    if not isinstance(output, Var):
        raise ContractError("backward needs a tracked output")
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.value.shape}")
    tape = output.tape
    grads: list = [None] * (output.index + 1)
    grads[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        g = grads[i]
        vjp = tape._vjps[i]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape._parents[i], vjp(g)):
            if pg is None or not isinstance(parent, Var):
                continue
            j = parent.index
            grads[j] = pg if grads[j] is None else grads[j] + pg
    result = {}
    for idx, leaf in tape._leaves.items():
        g = grads[idx] if idx < len(grads) else None
        result[leaf] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.value.shape)
    return result


def grad(f: Callable, point) -> np.ndarray:
    """Gradient of scalar ``f`` at ``point`` via the tape."""
    tape = Tape()
    x = tape.leaf(point)
    y = f(x)
    if not isinstance(y, Var):
        return np.zeros_like(x.value)
    return backward(y)[x]


def numerical_gradient(f: Callable, point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point``."""
    x = np.array(point, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(value_of(f(x)))
        flat[i] = orig - h
        fm = float(value_of(f(x)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def finite_diff_check(f: Callable, point, h: float = 1e-5, analytic=None) -> float:
    """Max over coordinates of ``|analytic - central FD| / max(1, |analytic|)``.

    ``analytic`` defaults to the tape gradient of ``f``; pass an explicit array
    to audit a hand-written gradient instead.
    """
    if analytic is None:
        analytic = grad(f, point)
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = numerical_gradient(f, point, h)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
