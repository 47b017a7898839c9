"""Reverse-mode automatic differentiation over numpy arrays.

A minimal tape: every operation returns a ``Var`` holding the forward value
and a closure that routes the upstream gradient to its parents.  All math is
float64.  The op set is exactly what the pair-refinement pipeline needs;
each backward rule is hand-derived and verified against central finite
differences in the test suite.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Var", np.ndarray, float, int]


class Var:
    """A node in the computation graph: value, gradient slot, backward hook."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        value: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable[[], None]] = None,
    ):
        if isinstance(value, Var):
            value = value.value
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    # Operator sugar; the heavy lifting lives in the module functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_var(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_var(x: ArrayLike) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _accumulate(var: Var, g: np.ndarray):
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = g.astype(np.float64, copy=True)
    else:
        var.grad = var.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape its source had before broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(value, parents, backward) -> Var:
    req = any(p.requires_grad for p in parents)
    return Var(value, requires_grad=req, _parents=parents if req else (),
               _backward=backward if req else None)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    out_val = a.value + b.value
    out = _node(out_val, (a, b), None)

    def backward():
        _accumulate(a, _unbroadcast(out.grad, a.value.shape))
        _accumulate(b, _unbroadcast(out.grad, b.value.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    out = _node(a.value * b.value, (a, b), None)

    def backward():
        _accumulate(a, _unbroadcast(out.grad * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(out.grad * a.value, b.value.shape))

    out._backward = backward if out.requires_grad else None
    return out


def scale(a: ArrayLike, c: float) -> Var:
    a = as_var(a)
    out = _node(a.value * c, (a,), None)

    def backward():
        _accumulate(a, out.grad * c)

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a: ArrayLike, b: ArrayLike) -> Var:
    """Matrix product; supports stacked (batched) operands via np.matmul."""
    a, b = as_var(a), as_var(b)
    out = _node(np.matmul(a.value, b.value), (a, b), None)

    def backward():
        ga = np.matmul(out.grad, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), out.grad)
        _accumulate(a, _unbroadcast(ga, a.value.shape))
        _accumulate(b, _unbroadcast(gb, b.value.shape))

    out._backward = backward if out.requires_grad else None
    return out


def relu(a: ArrayLike) -> Var:
    a = as_var(a)
    out = _node(np.maximum(a.value, 0.0), (a,), None)

    def backward():
        _accumulate(a, out.grad * (a.value > 0.0))

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid(a: ArrayLike) -> Var:
    a = as_var(a)
    x = a.value
    # Split by sign so exp never overflows, even at |x| = 100.
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _node(s, (a,), None)

    def backward():
        _accumulate(a, out.grad * s * (1.0 - s))

    out._backward = backward if out.requires_grad else None
    return out


def softplus(a: ArrayLike) -> Var:
    """log(1 + exp(x)) in the overflow-safe form max(x,0) + log1p(exp(-|x|))."""
    a = as_var(a)
    x = a.value
    out_val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = _node(out_val, (a,), None)

    def backward():
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(a, out.grad * s)

    out._backward = backward if out.requires_grad else None
    return out


def clip01(a: ArrayLike) -> Var:
    """Clamp to [0, 1]; gradient passes only where the input lies inside."""
    a = as_var(a)
    out = _node(np.clip(a.value, 0.0, 1.0), (a,), None)

    def backward():
        inside = (a.value > 0.0) & (a.value < 1.0)
        _accumulate(a, out.grad * inside)

    out._backward = backward if out.requires_grad else None
    return out


def power(a: ArrayLike, exponent: float) -> Var:
    """Elementwise x**p for a fixed scalar p >= 0; p = 0 is the constant 1."""
    a = as_var(a)
    if exponent == 0.0:
        return Var(np.ones_like(a.value))
    out = _node(np.power(a.value, exponent), (a,), None)

    def backward():
        base = a.value
        if exponent >= 1.0:
            g = exponent * np.power(base, exponent - 1.0)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                g = np.where(base > 0.0, exponent * np.power(base, exponent - 1.0), 0.0)
        _accumulate(a, out.grad * g)

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat(parts: Sequence[ArrayLike], axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    out = _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), None)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, out.grad[tuple(idx)])

    out._backward = backward if out.requires_grad else None
    return out


def gather_rows(a: ArrayLike, index: np.ndarray) -> Var:
    """Select rows along axis 0; the backward pass scatter-adds."""
    a = as_var(a)
    index = np.asarray(index, dtype=np.intp)
    out = _node(a.value[index], (a,), None)

    def backward():
        g = np.zeros_like(a.value)
        np.add.at(g, index, out.grad)
        _accumulate(a, g)

    out._backward = backward if out.requires_grad else None
    return out


def segment_mean(a: ArrayLike, segment_ids: np.ndarray, num_segments: int) -> Var:
    """Average rows sharing a segment id; empty segments produce zero rows."""
    a = as_var(a)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
    sums = np.zeros((num_segments,) + a.value.shape[1:], dtype=np.float64)
    np.add.at(sums, segment_ids, a.value)
    denom = np.maximum(counts, 1.0).reshape((num_segments,) + (1,) * (a.value.ndim - 1))
    out = _node(sums / denom, (a,), None)

    def backward():
        per_row = out.grad / denom
        _accumulate(a, per_row[segment_ids])

    out._backward = backward if out.requires_grad else None
    return out


def reshape(a: ArrayLike, shape: tuple) -> Var:
    a = as_var(a)
    out = _node(a.value.reshape(shape), (a,), None)

    def backward():
        _accumulate(a, out.grad.reshape(a.value.shape))

    out._backward = backward if out.requires_grad else None
    return out


def swapaxes(a: ArrayLike, ax1: int, ax2: int) -> Var:
    a = as_var(a)
    out = _node(np.swapaxes(a.value, ax1, ax2), (a,), None)

    def backward():
        _accumulate(a, np.swapaxes(out.grad, ax1, ax2))

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# normalization, attention, reductions
# ---------------------------------------------------------------------------

def normalize_rows(a: ArrayLike, eps: float = 1e-5) -> Var:
    """(x - mean) / sqrt(var + eps) along the last axis (population variance)."""
    a = as_var(a)
    x = a.value
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * inv
    out = _node(y, (a,), None)

    def backward():
        dy = out.grad
        d = x.shape[-1]
        dmean = dy.mean(axis=-1, keepdims=True)
        dproj = (dy * y).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (dy - dmean - y * dproj))
        del d

    out._backward = backward if out.requires_grad else None
    return out


def softmax_last(a: ArrayLike) -> Var:
    """Softmax along the last axis, shifted by the row max for stability."""
    a = as_var(a)
    x = a.value
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _node(y, (a,), None)

    def backward():
        dy = out.grad
        dot = (dy * y).sum(axis=-1, keepdims=True)
        _accumulate(a, (dy - dot) * y)

    out._backward = backward if out.requires_grad else None
    return out


def sum_all(a: ArrayLike) -> Var:
    a = as_var(a)
    out = _node(a.value.sum(), (a,), None)

    def backward():
        _accumulate(a, np.full_like(a.value, float(out.grad)))

    out._backward = backward if out.requires_grad else None
    return out


def mean_all(a: ArrayLike) -> Var:
    a = as_var(a)
    n = a.value.size
    out = _node(a.value.mean(), (a,), None)

    def backward():
        _accumulate(a, np.full_like(a.value, float(out.grad) / n))

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(root: Var):
    """Run reverse-mode accumulation from a scalar root."""
    if root.value.ndim != 0:
        raise ValueError("backward() expects a scalar root")
    if not root.requires_grad:
        return
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, post = stack.pop()
        if post:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
