"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` is an append-only Wengert list.  Every operation appends one
node holding its forward value and a vector-Jacobian product closure, so node
ids are topologically ordered by construction and :meth:`Tape.backward` is a
single reverse sweep.

Broadcasting is deliberately narrow: a binary operand may have a shape that is
a *suffix* of the other operand's shape (a row vector over matrix rows, a
scalar over anything, a mask over a batch of matrices).  Gradients of the
broadcast operand are summed over the leading axes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

__all__ = [
    "ShapeError",
    "DomainError",
    "ConditioningError",
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "exp",
    "log",
    "elementwise",
    "matmul",
    "transpose",
    "reshape",
    "permute",
    "concat",
    "total",
    "softmax_rows",
    "pairwise_sqdist",
    "cholesky",
    "solve_triangular",
    "diag",
    "backward",
    "finite_diff_check",
    "JITTER_START",
    "JITTER_MAX",
]

JITTER_START = 1e-8
JITTER_MAX = 1e-4


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ConditioningError(ArithmeticError):
    """Raised when a matrix cannot be factorized even after jitter escalation."""

    def __init__(self, message: str, jitter: float | None = None, residual: float | None = None):
        super().__init__(message)
        self.jitter = jitter
        self.residual = residual


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of forward operations.

    ``nodes[i]`` is ``(op_name, input_ids, vjp)``; values live on the
    :class:`Var` handles and in ``values``.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], VJP | None]] = []
        self.values: list[np.ndarray] = []
        self.requires: list[bool] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: str, inputs: tuple[int, ...], value: np.ndarray, vjp: VJP | None,
              requires_grad: bool) -> Var:
        if not np.isfinite(value).all():
            raise DomainError(f"{op} produced non-finite values")
        self.nodes.append((op, inputs, vjp))
        self.values.append(value)
        self.requires.append(requires_grad)
        return Var(self, len(self.nodes) - 1, value)

    def leaf(self, value, name: str | None = None) -> Var:
        """A differentiable input (parameter or probe point)."""
        return self._push(name or "leaf", (), np.array(value, dtype=np.float64), None, True)

    def constant(self, value) -> Var:
        """A non-differentiable input; gradients are not accumulated for it."""
        return self._push("const", (), np.array(value, dtype=np.float64), None, False)

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray, vjp: VJP) -> Var:
        """Append a custom operation.  ``vjp(g)`` returns one gradient per input."""
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{op}: operand belongs to a different tape")
        ids = tuple(v.id for v in inputs)
        req = any(self.requires[i] for i in ids)
        return self._push(op, ids, np.asarray(value, dtype=np.float64), vjp if req else None, req)

    def backward(self, loss: Var) -> list[np.ndarray | None]:
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.id] = np.ones_like(loss.value)
        for i in range(loss.id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            _, inputs, vjp = self.nodes[i]
            if vjp is None:
                continue
            for j, gj in zip(inputs, vjp(g)):
                if gj is None or not self.requires[j]:
                    continue
                if grads[j] is None:
                    grads[j] = np.array(gj, dtype=np.float64, copy=True)
                else:
                    grads[j] += gj
        return grads

    def gradient(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each of ``wrt``; unreachable leaves get zeros."""
        grads = self.backward(loss)
        out = []
        for v in wrt:
            g = grads[v.id]
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


def backward(tape: Tape, loss: Var) -> list[np.ndarray | None]:
    return tape.backward(loss)


# -- helpers -----------------------------------------------------------------


def _lift(x, like: Var) -> Var:
    if isinstance(x, Var):
        return x
    return like.tape.constant(x)


def _pair(a, b) -> tuple[Var, Var]:
    if isinstance(a, Var):
        return a, _lift(b, a)
    if isinstance(b, Var):
        return _lift(a, b), b
    raise TypeError("at least one operand must be a Var")


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape.record("add", (a, b), a.value + b.value,
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape.record("sub", (a, b), a.value - b.value,
                         lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.record("mul", (a, b), av * bv,
                         lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("scale", (a,), a.value * c, lambda g: (g * c,))


def neg(a: Var) -> Var:
    return scale(a, -1.0)


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def exp(a: Var) -> Var:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)   # overflow surfaces as DomainError on push
    return a.tape.record("exp", (a,), out, lambda g: (g * out,))


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive value")
    av = a.value
    return a.tape.record("log", (a,), np.log(av), lambda g: (g / av,))


_UNARY = {"relu": relu, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a: Var, b=None, kind: str = "add") -> Var:
    """Dispatch by name; ``scale`` takes a float as ``b``."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- structural --------------------------------------------------------------


def matmul(a, b) -> Var:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of (k, n) or (..., k, n)."""
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or (
        bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]
    ):
        raise ShapeError(f"matmul: cannot multiply shapes {av.shape} and {bv.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            k = av.shape[-1]
            gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return a.tape.record("matmul", (a, b), av @ bv, vjp)


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", (a,), np.swapaxes(a.value, -1, -2),
                         lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.tape.record("permute", (a,), np.transpose(a.value, axes),
                         lambda g: (np.transpose(g, inv),))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return parts[0].tape.record("concat", tuple(parts), out, vjp)


def total(a: Var) -> Var:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return a.tape.record("sum", (a,), np.array(a.value.sum()),
                         lambda g: (np.broadcast_to(g, shape),))


def diag(a: Var) -> Var:
    n = a.shape[-1]

    def vjp(g):
        out = np.zeros((n, n))
        out[np.diag_indices(n)] = g
        return (out,)

    return a.tape.record("diag", (a,), np.diagonal(a.value).copy(), vjp)


# -- attention and kernel primitives -----------------------------------------


def softmax_rows(a: Var) -> Var:
    """Softmax over the last axis with max subtraction."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return a.tape.record("softmax", (a,), p, vjp)


def pairwise_sqdist(a: Var, b: Var) -> Var:
    """D[i, j] = ||a_i - b_j||^2, computed from explicit differences."""
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-1]:
        raise ShapeError(f"pairwise_sqdist: widths differ, {av.shape} vs {bv.shape}")
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return a.tape.record("sqdist", (a, b), out, vjp)


def _jitter_schedule() -> list[float]:
    out, j = [0.0], JITTER_START
    while j <= JITTER_MAX * (1 + 1e-9):
        out.append(j)
        j *= 10.0
    out[-1] = JITTER_MAX
    return out


def _cholesky_jittered(A: np.ndarray) -> tuple[np.ndarray, float]:
    n = A.shape[0]
    for jitter in _jitter_schedule():
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(n) if jitter else A)
            if np.all(np.isfinite(L)):
                return L, jitter
        except np.linalg.LinAlgError:
            pass
    raise ConditioningError(
        f"Cholesky failed for {n}x{n} matrix with jitter up to {JITTER_MAX:g}", jitter=JITTER_MAX
    )


def cholesky(a: Var) -> Var:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Jitter is tried at 0, then 1e-8, escalating by 10x up to 1e-4.  The
    gradient is the symmetric one, so it is valid when ``a`` is built
    symmetrically from upstream values.
    """
    L, jitter = _cholesky_jittered(a.value)

    def vjp(gL):
        phi = np.tril(L.T @ gL)
        phi[np.diag_indices_from(phi)] *= 0.5
        tmp = sla.solve_triangular(L, phi.T, lower=True, trans="T")
        S = sla.solve_triangular(L, tmp.T, lower=True, trans="T")
        return (0.5 * (S + S.T),)

    out = a.tape.record("cholesky", (a,), L, vjp)
    return out


def solve_triangular(lower_factor: Var, b: Var, trans: bool = False) -> Var:
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``.

    Only the lower triangle of ``L`` is read; its gradient is lower triangular.
    """
    Lv, bv = lower_factor.value, b.value
    if Lv.ndim != 2 or Lv.shape[0] != Lv.shape[1] or bv.shape[0] != Lv.shape[0]:
        raise ShapeError(f"solve_triangular: shapes {Lv.shape} and {bv.shape}")
    t = "T" if trans else "N"
    x = sla.solve_triangular(Lv, bv, lower=True, trans=t)

    def vjp(g):
        gb = sla.solve_triangular(Lv, g, lower=True, trans="N" if trans else "T")
        if trans:
            gL = -np.tril(np.outer(x, gb) if x.ndim == 1 else x @ gb.T)
        else:
            gL = -np.tril(np.outer(gb, x) if x.ndim == 1 else gb @ x.T)
        return gL, gb

    return lower_factor.tape.record("trisolve", (lower_factor, b), x, vjp)


# -- gradient checking -------------------------------------------------------


def finite_diff_check(f: Callable[[Tape, Var], Var], x, h: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f(tape, x_var)`` must return a scalar :class:`Var`.  The error per
    coordinate is ``|a - c| / (|a| + |c| + 1e-12)``.  ``coords`` restricts the
    comparison to a subset of flat indices.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x)
    (analytic,) = tape.gradient(f(tape, xv), [xv])
    analytic = analytic.ravel()

    def value(z):
        t = Tape()
        return float(f(t, t.leaf(z)).value)

    idx = range(x.size) if coords is None else coords
    worst = 0.0
    flat = x.ravel()
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        c = (value(xp.reshape(x.shape)) - value(xm.reshape(x.shape))) / (2.0 * h)
        a = analytic[i]
        err = abs(a - c) / (abs(a) + abs(c) + 1e-12)
        worst = max(worst, err)
    return worst
