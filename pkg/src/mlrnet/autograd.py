"""A small reverse-mode differentiation tape over numpy arrays.

Only the operations needed by the MLR forward pass are provided. Every
operation whose inputs include a trainable leaf is appended to the tape
in execution order, so replaying the tape backwards is a valid
topological traversal. Operations on constants alone are evaluated
eagerly and never recorded.

    tape = Tape()
    W = tape.param(np.ones((2, 2)), "W")
    loss = W.sum()
    grads = backward(tape, loss)   # {"W": ones}
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import linalg
from .errors import NonFiniteGradient, NonScalarRoot

GradientMap = dict  # parameter name -> gradient array

SQRT_FLOOR = 1e-12


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, value, name: str) -> "Var":
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Var(np.asarray(value), tape=self, requires_grad=True, name=name)
        self.params[name] = v
        return v

    def const(self, value) -> "Var":
        return Var(np.asarray(value), tape=self)


class Var:
    __slots__ = ("value", "tape", "parents", "adjoint", "requires_grad", "name")

    def __init__(self, value, tape=None, parents=(), adjoint=None,
                 requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.adjoint = adjoint
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, key): return getitem(self, key)

    @property
    def T(self): return transpose(self)

    def sum(self, axis=None): return sum_(self, axis)
    def mean(self, axis=None): return mean(self, axis)


def _lift(x, tape) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x), tape=tape)


def _record(value, inputs, adjoint) -> Var:
    """Create the output node; record it only if some input needs a gradient."""
    tape = next((v.tape for v in inputs if v.tape is not None), None)
    if not any(v.requires_grad for v in inputs):
        return Var(value, tape=tape)
    out = Var(value, tape=tape, parents=tuple(inputs), adjoint=adjoint, requires_grad=True)
    tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    tape = a.tape if isinstance(a, Var) else getattr(b, "tape", None)
    return _lift(a, tape), _lift(b, tape)


# elementwise
def add(a, b) -> Var:
    a, b = _pair(a, b)
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    return _record(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)))


def square(a: Var) -> Var:
    return _record(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0.0)
    return _record(out, (a,), lambda g: (g * (out > 0),))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    return _record(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a: Var) -> Var:
    """Square root whose adjoint divides by max(sqrt, 1e-12)."""
    out = np.sqrt(a.value)
    return _record(out, (a,), lambda g: (g / (2.0 * np.maximum(out, SQRT_FLOOR)),))


def abs_(a: Var) -> Var:
    # sign(0) == 0 gives the zero subgradient at the kink
    return _record(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def softplus(a: Var) -> Var:
    """log(1 + e^x), computed stably."""
    x = a.value
    out = np.logaddexp(0.0, x)
    return _record(out, (a,), lambda g: (g * _logistic(x),))


def _logistic(x):
    return np.exp(-np.logaddexp(0.0, -x))


# reductions and reshaping
def sum_(a: Var, axis=None) -> Var:
    out = a.value.sum(axis=axis)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _record(out, (a,), adjoint)


def mean(a: Var, axis=None) -> Var:
    count = a.value.size if axis is None else a.shape[axis]
    out = a.value.mean(axis=axis)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return _record(out, (a,), adjoint)


def getitem(a: Var, key) -> Var:
    def adjoint(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)
    return _record(a.value[key], (a,), adjoint)


def transpose(a: Var) -> Var:
    return _record(a.value.T, (a,), lambda g: (g.T,))


# linear algebra
def matmul(a, b) -> Var:
    a, b = _pair(a, b)
    av, bv = a.value, b.value

    def adjoint(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb
    return _record(av @ bv, (a, b), adjoint)


def gram(A: Var) -> Var:
    """A @ A.T as a single node (adjoint (G + G^T) A)."""
    av = A.value
    return _record(av @ av.T, (A,), lambda g: ((g + g.T) @ av,))


def shift_diagonal(M: Var, lam) -> Var:
    """M + lam * I with lam a scalar Var (or number)."""
    M, lam = _pair(M, lam)
    out = linalg.shift_diagonal(M.value, lam.value)

    def adjoint(g):
        return g, np.asarray(np.trace(g)).reshape(lam.shape)
    return _record(out, (M, lam), adjoint)


def spd_solve(M: Var, B) -> Var:
    """X = M^{-1} B for symmetric positive-definite M.

    Adjoint: B_bar = M^{-1} X_bar, M_bar = -sym(B_bar X^T).
    """
    M, B = _pair(M, B)
    factor = linalg.SpdFactor(M.value, check_symmetry=False)
    X = factor.solve(B.value)

    def adjoint(g):
        gb = factor.solve(g)
        if M.requires_grad:
            outer = gb @ X.T if X.ndim == 2 else np.outer(gb, X)
            gm = -0.5 * (outer + outer.T)
        else:
            gm = None
        return gm, gb
    return _record(X, (M, B), adjoint)


# backward pass
def backward(tape: Tape, root: Var) -> GradientMap:
    """Reverse-mode gradients of a scalar ``root`` w.r.t. every tape parameter."""
    if root.value.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.value)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out: GradientMap = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        g = np.zeros_like(p.value) if g is None else np.asarray(g).reshape(p.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out


def value_and_grad(fn: Callable[[Tape, dict], Var], params: dict) -> tuple[float, GradientMap]:
    """Evaluate ``fn`` on a fresh tape and differentiate it."""
    tape = Tape()
    pvars = {k: tape.param(v, k) for k, v in params.items()}
    root = fn(tape, pvars)
    return float(root.value), backward(tape, root)


def grad_check(fn: Callable[[Tape, dict], Var], params: dict, eps: float = 1e-5) -> float:
    """Max relative discrepancy between taped and central-difference gradients.

    Relative error per entry is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    _, ad = value_and_grad(fn, params)

    def evaluate(p):
        tape = Tape()
        return float(fn(tape, {k: tape.const(v) for k, v in p.items()}).value)

    worst = 0.0
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        for idx in np.ndindex(value.shape):
            shifted = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
            shifted[name][idx] = value[idx] + eps
            up = evaluate(shifted)
            shifted[name][idx] = value[idx] - eps
            down = evaluate(shifted)
            fd = (up - down) / (2 * eps)
            g = ad[name][idx]
            worst = max(worst, abs(g - fd) / max(1.0, abs(g), abs(fd)))
    return worst
