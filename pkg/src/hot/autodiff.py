"""Minimal reverse-mode tape over numpy arrays.

Every operation produces a fresh ``Var`` and appends one backward closure to
the owning tape, so replaying the tape in reverse visits each recorded
operation exactly once.  Gradients accumulate into ``Var.grad`` buffers with
the same shape as the primal values.  Constants (``requires_grad=False``)
record nothing.
"""

from __future__ import annotations

import math
import string

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TapeConsumedError(RuntimeError):
    """Raised when a tape is asked to run backward a second time."""


class Tape:
    def __init__(self):
        self._nodes = []
        self._consumed = False

    def var(self, value, requires_grad: bool = True) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self, requires_grad)

    def record(self, fn) -> None:
        self._nodes.append(fn)

    def backward(self, loss: "Var") -> None:
        """Seed the scalar ``loss`` with adjoint 1 and sweep the tape in reverse."""
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a previous backward()")
        if loss.value.size != 1:
            raise ValueError("backward() needs a scalar loss")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._nodes):
            fn()


class Var:
    """A value in the computation graph; ``grad`` is filled by ``Tape.backward``."""

    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value: np.ndarray, tape: Tape | None, requires_grad: bool):
        if requires_grad and tape is None:
            raise ValueError("a tracked Var needs a tape")
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64), None, False)


def _lift(x, tape) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), tape, False)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _accum(x: Var, g: np.ndarray) -> None:
    if x.grad is None:
        x.grad = np.array(g, dtype=np.float64)
    else:
        x.grad += g  # grad buffer is privately owned, in-place is safe


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b):
    tape = _tape_of(a, b)
    a = _lift(a, tape)
    b = _lift(b, tape)
    out = Var(fwd(a.value, b.value), tape, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(bwd_a(out.grad, a.value, b.value), a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(bwd_b(out.grad, a.value, b.value), b.shape))
        tape.record(backward)
    return out


def add(a, b) -> Var:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Var:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Var:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(a, fwd, bwd):
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = Var(fwd(a.value), tape, a.requires_grad)
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            _accum(a, bwd(out.grad, a.value, out.value))
        tape.record(backward)
    return out


def scale(a, c: float) -> Var:
    c = float(c)
    return _unary(a, lambda x: x * c, lambda g, x, y: g * c)


def shift(a, c: float) -> Var:
    c = float(c)
    return _unary(a, lambda x: x + c, lambda g, x, y: g)


def exp(a) -> Var:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a) -> Var:
    return _unary(a, np.log, lambda g, x, y: g / x)


def power(a, p: float) -> Var:
    p = float(p)
    return _unary(a, lambda x: x ** p, lambda g, x, y: g * p * x ** (p - 1.0))


def clip_min(a, floor: float) -> Var:
    floor = float(floor)
    return _unary(a, lambda x: np.maximum(x, floor), lambda g, x, y: g * (x > floor))


def gelu(a) -> Var:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    def fwd(x):
        fwd.cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))  # reused by the adjoint
        return x * fwd.cdf

    def bwd(g, x, y):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return g * (fwd.cdf + x * pdf)

    return _unary(a, fwd, bwd)


def reshape(a, shape) -> Var:
    shape = tuple(shape)
    return _unary(a, lambda x: x.reshape(shape), lambda g, x, y: g.reshape(x.shape))


def transpose(a, axes) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _unary(
        a,
        lambda x: np.ascontiguousarray(np.transpose(x, axes)),
        lambda g, x, y: np.transpose(g, inverse),
    )


def sum_axes(a, axes=None, keepdims: bool = False) -> Var:
    tape = _tape_of(a)
    a = _lift(a, tape)
    if axes is None:
        axes = tuple(range(a.value.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    out = Var(a.value.sum(axis=axes, keepdims=keepdims), tape, a.requires_grad)
    if out.requires_grad:
        in_shape = a.shape

        def backward():
            if out.grad is None:
                return
            g = out.grad
            if not keepdims:
                for ax in sorted(axes):
                    g = np.expand_dims(g, ax)
            _accum(a, np.broadcast_to(g, in_shape))
        tape.record(backward)
    return out


def mean_all(a) -> Var:
    a_var = a if isinstance(a, Var) else constant(a)
    return scale(sum_axes(a_var), 1.0 / a_var.value.size)


def einsum(subscripts: str, *xs) -> Var:
    """Differentiable einsum; no ellipses, no in-operand repeated indices."""
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    in_part, out_sub = subscripts.split("->")
    in_subs = in_part.split(",")
    if len(in_subs) != len(xs):
        raise ValueError(f"{subscripts!r} expects {len(in_subs)} operands, got {len(xs)}")
    values = [x.value for x in xs]
    out = Var(np.einsum(subscripts, *values, optimize=True), tape, any(x.requires_grad for x in xs))
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            for i, x in enumerate(xs):
                if not x.requires_grad:
                    continue
                rest_subs = [in_subs[j] for j in range(len(xs)) if j != i]
                rest_vals = [values[j] for j in range(len(xs)) if j != i]
                spec = ",".join([out_sub] + rest_subs) + "->" + in_subs[i]
                _accum(x, np.einsum(spec, out.grad, *rest_vals, optimize=True))
        tape.record(backward)
    return out


def matmul(a, b, ta: bool = False, tb: bool = False) -> Var:
    """Batched matrix product over the last two axes (BLAS-backed).

    ``ta``/``tb`` transpose the last two axes of the operand first.  Leading
    axes must match exactly, except that a 2-D ``b`` broadcasts across all
    leading axes of ``a`` (the usual shared-weight case).
    """
    tape = _tape_of(a, b)
    a = _lift(a, tape)
    b = _lift(b, tape)
    av, bv = a.value, b.value
    lhs = av.swapaxes(-1, -2) if ta else av
    rhs = bv.swapaxes(-1, -2) if tb else bv
    out = Var(np.matmul(lhs, rhs), tape, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        b_broadcast = bv.ndim == 2 and av.ndim > 2

        def backward():
            if out.grad is None:
                return
            g = out.grad
            if a.requires_grad:
                # y = A @ B with A = a^T(a) etc.; undo the transposes
                if ta:
                    da = np.matmul(rhs, g.swapaxes(-1, -2))
                else:
                    da = np.matmul(g, rhs.swapaxes(-1, -2))
                _accum(a, da)
            if b.requires_grad:
                if b_broadcast:
                    lhs2 = lhs.reshape(-1, lhs.shape[-1])
                    g2 = g.reshape(-1, g.shape[-1])
                    db = lhs2.T @ g2
                else:
                    db = np.matmul(lhs.swapaxes(-1, -2), g)
                if tb:
                    db = db.swapaxes(-1, -2)
                _accum(b, db)
        tape.record(backward)
    return out


def concat_last(xs) -> Var:
    """Concatenate along the last axis; the adjoint slices gradients back."""
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    out = Var(np.concatenate([x.value for x in xs], axis=-1), tape,
              any(x.requires_grad for x in xs))
    if out.requires_grad:
        widths = [x.shape[-1] for x in xs]

        def backward():
            if out.grad is None:
                return
            offset = 0
            for x, w in zip(xs, widths):
                if x.requires_grad:
                    _accum(x, out.grad[..., offset:offset + w])
                offset += w
        tape.record(backward)
    return out


def softmax_last(a) -> Var:
    """Softmax along the last axis, stabilized by max subtraction."""
    tape = _tape_of(a)
    a = _lift(a, tape)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Var(p, tape, a.requires_grad)
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            _accum(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))
        tape.record(backward)
    return out


def log_softmax_last(a) -> Var:
    tape = _tape_of(a)
    a = _lift(a, tape)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_val = shifted - lse
    out = Var(out_val, tape, a.requires_grad)
    if out.requires_grad:
        p = np.exp(out_val)

        def backward():
            if out.grad is None:
                return
            g = out.grad
            _accum(a, g - p * g.sum(axis=-1, keepdims=True))
        tape.record(backward)
    return out


_LETTERS = string.ascii_lowercase


def axis_letters(n: int) -> str:
    """Distinct einsum letters for an n-axis operand."""
    if n > len(_LETTERS) - 2:
        raise ValueError("too many axes for einsum letter pool")
    return _LETTERS[:n]
