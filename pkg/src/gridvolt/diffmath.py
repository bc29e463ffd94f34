"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` objects.
Node ids grow with creation order, so replaying the tape backwards is a valid
topological order. Each node keeps its parents together with a vector-Jacobian
product closure (the tensor generalisation of a local partial derivative).

Complex quantities are carried as pairs of real nodes (:class:`DComplex`).

The elementwise helpers (:func:`clamp`, :func:`relu`, :func:`sqrt`, ...) accept
either plain arrays or nodes and evaluate the *same* numpy expression in both
cases, so code written against them produces bit-identical values on and off
the tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape", "Node", "DComplex", "Gradients", "GradCheckResult",
    "TapeError", "StaleTapeError", "NonDifferentiableError", "InvalidBoundsError",
    "d_add", "d_sub", "d_mul", "d_div", "d_neg", "d_clamp",
    "c_add", "c_sub", "c_mul", "c_div", "c_conj", "c_abs", "c_matvec",
    "backward", "grad_check",
    "clamp", "relu", "sqrt", "square", "tanh", "absolute", "minimum", "maximum",
    "matmul", "concat", "sum_", "mean", "value_of",
]


class TapeError(RuntimeError):
    """Operands from different tapes, or misuse of a tape."""


class StaleTapeError(TapeError):
    """The tape already ran its backward pass."""


class NonDifferentiableError(ArithmeticError):
    pass


class InvalidBoundsError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Single-use record of operations.

    ``track_branches`` makes piecewise ops log which branch every element
    took; :func:`grad_check` uses the log to detect kinks.
    """

    def __init__(self, track_branches: bool = False):
        self.nodes: list[Node] = []
        self.consumed = False
        self.track_branches = track_branches
        self.branch_log: list[bytes] = []

    def var(self, value, name: str | None = None) -> "Node":
        """Create a leaf (parameter or input) node."""
        return self._record(np.array(value, dtype=np.float64), (), name=name)

    def custom(self, value: np.ndarray, parents: Sequence[tuple["Node", Callable]]) -> "Node":
        """Record an op with a hand-written vector-Jacobian product per parent."""
        for p, _ in parents:
            self._check(p)
        return self._record(value, tuple(parents))

    def _check(self, node: "Node"):
        if node.tape is not self:
            raise TapeError("operands live on different tapes")

    def _record(self, value, parents, name=None) -> "Node":
        if self.consumed:
            raise StaleTapeError("cannot record on a tape that already ran backward")
        node = Node(self, len(self.nodes), value, parents, name)
        self.nodes.append(node)
        return node

    def _log_branch(self, *masks):
        if self.track_branches:
            self.branch_log.append(b"".join(np.packbits(m).tobytes() for m in masks))


class Node:
    __slots__ = ("tape", "id", "value", "parents", "name", "adjoint")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, id_: int, value: np.ndarray, parents, name=None):
        self.tape = tape
        self.id = id_
        self.value = value
        self.parents = parents
        self.name = name
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return d_add(self, other)

    def __radd__(self, other):
        return d_add(other, self)

    def __sub__(self, other):
        return d_sub(self, other)

    def __rsub__(self, other):
        return d_sub(other, self)

    def __mul__(self, other):
        return d_mul(self, other)

    def __rmul__(self, other):
        return d_mul(other, self)

    def __truediv__(self, other):
        return d_div(self, other)

    def __rtruediv__(self, other):
        return d_div(other, self)

    def __neg__(self):
        return d_neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self):
        return _transpose(self)

    def reshape(self, *shape):
        return _reshape(self, shape[0] if len(shape) == 1 else shape)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
    return tape


def _binary(a, b, value, ga, gb):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, shape=a.value.shape: _unbroadcast(ga(g), shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g, shape=b.value.shape: _unbroadcast(gb(g), shape)))
    return tape._record(np.asarray(value, dtype=np.float64), tuple(parents))


def _unary(x, value, gx):
    if not isinstance(x, Node):
        return value
    return x.tape._record(np.asarray(value, dtype=np.float64), ((x, gx),))


# -- scalar/tensor primitives ------------------------------------------------

def d_add(a, b):
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def d_sub(a, b):
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def d_mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def d_div(a, b):
    av, bv = value_of(a), value_of(b)
    if np.any(np.asarray(bv) == 0):
        raise ZeroDivisionError("d_div: divisor is zero")
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def d_neg(a):
    return _unary(a, -value_of(a), lambda g: -g)


def d_clamp(x, lo, hi):
    """Clamp with partial 1 strictly inside ``(lo, hi)`` and 0 elsewhere.

    The boundary itself gets subgradient 0: a saturated actuator receives no
    push further into saturation.
    """
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise InvalidBoundsError(f"clamp bounds lo > hi ({lo} > {hi})")
    xv = value_of(x)
    out = np.minimum(hi, np.maximum(lo, xv))
    if not isinstance(x, Node):
        return out
    inside = (xv > lo) & (xv < hi)
    x.tape._log_branch(np.asarray(xv > lo), np.asarray(xv < hi))
    return _unary(x, out, lambda g: g * inside)


clamp = d_clamp


def relu(x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    if not isinstance(x, Node):
        return out
    pos = xv > 0.0
    x.tape._log_branch(np.asarray(pos))
    return _unary(x, out, lambda g: g * pos)


def maximum(x, c):
    """Elementwise max of a node and a constant."""
    xv = value_of(x)
    out = np.maximum(xv, c)
    if not isinstance(x, Node):
        return out
    if isinstance(c, Node):
        raise TapeError("maximum: second operand must be constant")
    above = xv > c
    x.tape._log_branch(np.asarray(above))
    return _unary(x, out, lambda g: g * above)


def minimum(x, c):
    xv = value_of(x)
    out = np.minimum(xv, c)
    if not isinstance(x, Node):
        return out
    if isinstance(c, Node):
        raise TapeError("minimum: second operand must be constant")
    below = xv < c
    x.tape._log_branch(np.asarray(below))
    return _unary(x, out, lambda g: g * below)


def absolute(x):
    xv = value_of(x)
    out = np.abs(xv)
    if not isinstance(x, Node):
        return out
    sign = np.sign(xv)
    x.tape._log_branch(np.asarray(xv > 0), np.asarray(xv < 0))
    return _unary(x, out, lambda g: g * sign)


def sqrt(x):
    xv = value_of(x)
    out = np.sqrt(xv)
    if not isinstance(x, Node):
        return out
    if np.any(out == 0):
        raise NonDifferentiableError("sqrt is not differentiable at 0")
    return _unary(x, out, lambda g: g * 0.5 / out)


def square(x):
    xv = value_of(x)
    return _unary(x, xv * xv, lambda g: 2.0 * g * xv)


def tanh(x):
    xv = value_of(x)
    out = np.tanh(xv)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
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

    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, ga))
    if isinstance(b, Node):
        parents.append((b, gb))
    return tape._record(np.asarray(out, dtype=np.float64), tuple(parents))


def sum_(x, axis=None):
    xv = value_of(x)
    out = xv.sum(axis=axis)
    if not isinstance(x, Node):
        return out
    shape = xv.shape

    def gx(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return _unary(x, out, gx)


def mean(x, axis=None):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return d_mul(sum_(x, axis=axis), 1.0 / n)


def concat(parts: Sequence, axis: int = -1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents = []
    for k, p in enumerate(parts):
        if isinstance(p, Node):
            lo, hi = int(bounds[k]), int(bounds[k + 1])
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(lo, hi)
            sl = tuple(sl)
            parents.append((p, lambda g, sl=sl: g[sl]))
    return tape._record(out, tuple(parents))


def _getitem(x: Node, idx):
    shape = x.value.shape

    def gx(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _unary(x, x.value[idx], gx)


def _transpose(x: Node):
    return _unary(x, x.value.T, lambda g: g.T)


def _reshape(x: Node, shape):
    old = x.value.shape
    return _unary(x, x.value.reshape(shape), lambda g: g.reshape(old))


# -- complex numbers as real pairs -------------------------------------------

@dataclass
class DComplex:
    re: object
    im: object

    @property
    def value(self) -> np.ndarray:
        return value_of(self.re) + 1j * value_of(self.im)


def c_add(a: DComplex, b: DComplex) -> DComplex:
    return DComplex(d_add(a.re, b.re), d_add(a.im, b.im))


def c_sub(a: DComplex, b: DComplex) -> DComplex:
    return DComplex(d_sub(a.re, b.re), d_sub(a.im, b.im))


def c_mul(a: DComplex, b: DComplex) -> DComplex:
    re = d_sub(d_mul(a.re, b.re), d_mul(a.im, b.im))
    im = d_add(d_mul(a.re, b.im), d_mul(a.im, b.re))
    return DComplex(re, im)


def c_conj(a: DComplex) -> DComplex:
    return DComplex(a.re, d_neg(a.im))


def c_div(a: DComplex, b: DComplex) -> DComplex:
    den = d_add(d_mul(b.re, b.re), d_mul(b.im, b.im))
    re = d_div(d_add(d_mul(a.re, b.re), d_mul(a.im, b.im)), den)
    im = d_div(d_sub(d_mul(a.im, b.re), d_mul(a.re, b.im)), den)
    return DComplex(re, im)


def c_abs(a: DComplex):
    """Modulus; partials re/|z| and im/|z|. Undefined at exactly zero."""
    sq = d_add(d_mul(a.re, a.re), d_mul(a.im, a.im))
    if np.any(value_of(sq) == 0):
        raise NonDifferentiableError("c_abs is not differentiable at 0")
    return sqrt(sq)


def c_matvec(m: np.ndarray, z: DComplex) -> DComplex:
    """Constant complex matrix times a (batch of) complex vector(s): ``z @ m.T``."""
    mr, mi = np.ascontiguousarray(m.real.T), np.ascontiguousarray(m.imag.T)
    re = d_sub(matmul(z.re, mr), matmul(z.im, mi))
    im = d_add(matmul(z.re, mi), matmul(z.im, mr))
    return DComplex(re, im)


# -- backward pass -----------------------------------------------------------

class Gradients(dict):
    """Mapping from leaf nodes to adjoint arrays (zeros when unreachable)."""

    def __missing__(self, node):
        return np.zeros_like(node.value)


def backward(root: Node, wrt: Iterable[Node] | None = None) -> Gradients:
    """Propagate adjoints from a scalar ``root``; consumes the tape.

    Returns adjoints for every leaf (or just ``wrt``).
    """
    tape = root.tape
    if tape.consumed:
        raise StaleTapeError("tape already consumed by a previous backward pass")
    if root.value.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    tape.consumed = True
    root.adjoint = np.ones_like(root.value)
    for node in reversed(tape.nodes[: root.id + 1]):
        g = node.adjoint
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.adjoint is None:
                parent.adjoint = np.array(contrib, dtype=np.float64)
            else:
                parent.adjoint = parent.adjoint + contrib
    grads = Gradients()
    leaves = wrt if wrt is not None else (n for n in tape.nodes if not n.parents)
    for leaf in leaves:
        grads[leaf] = leaf.adjoint if leaf.adjoint is not None else np.zeros_like(leaf.value)
    return grads


# -- verification ------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    kink_coords: list = field(default_factory=list)
    nan_coords: list = field(default_factory=list)

    @property
    def checked(self) -> int:
        return int(self.errors.size - len(self.kink_coords) - len(self.nan_coords))


def grad_check(f: Callable[[Node], Node], x, h: float = 1e-6) -> GradCheckResult:
    """Compare tape gradients of ``f`` with central differences.

    Error per coordinate is ``|analytic - fd| / max(1, |fd|)``. Coordinates
    whose +h and -h evaluations take different branches of any piecewise op
    are reported in ``kink_coords`` and left out of ``max_rel_error``.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    leaf = tape.var(x)
    out = f(leaf)
    analytic = backward(out, [leaf])[leaf].reshape(-1)

    def evaluate(point):
        t = Tape(track_branches=True)
        val = float(np.asarray(f(t.var(point)).value).reshape(()))
        return val, t.branch_log

    flat = x.reshape(-1)
    numeric = np.empty(flat.size)
    errors = np.empty(flat.size)
    kinks, nans = [], []
    _, base_log = evaluate(x)
    for k in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[k] += h
        xm[k] -= h
        fp, logp = evaluate(xp.reshape(x.shape))
        fm, logm = evaluate(xm.reshape(x.shape))
        numeric[k] = (fp - fm) / (2 * h)
        errors[k] = abs(analytic[k] - numeric[k]) / max(1.0, abs(numeric[k]))
        if not math.isfinite(errors[k]):
            nans.append(k)
        elif logp != base_log or logm != base_log:
            kinks.append(k)
    mask = np.ones(flat.size, dtype=bool)
    mask[kinks + nans] = False
    max_err = float(errors[mask].max()) if mask.any() else 0.0
    return GradCheckResult(max_err, errors, analytic, numeric, kinks, nans)
