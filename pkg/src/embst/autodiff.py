"""Reverse-mode automatic differentiation over dense float64 arrays.

Provides exactly the primitive set the translation model needs: matmul,
linear, add, mul, neg, concat, narrow (slice), reshape, tanh, sigmoid,
temperature softmax (optionally masked), log, sum, mean, cosine
similarity, embedding-row gather, weighted cross entropy from log
probabilities, and clamping.  Operations execute eagerly on numpy
arrays while recording parents and a backward closure on each output,
so the implicit DAG of ``Tensor`` nodes is the computation graph;
``backward`` replays it in exact reverse topological order.

A finite-difference harness (``gradient_check``) validates every
analytic gradient against central differences.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

NORM_EPS = 1e-12  # added inside each norm so cosine never divides by zero


class GraphError(Exception):
    """Misuse of the graph API (non-scalar loss, detached backward, ...)."""


class ShapeError(GraphError):
    """Operands with incompatible shapes; message names the failing node."""


class NonFiniteError(GraphError):
    """An operation produced NaN or Inf."""


_node_ids = itertools.count()
_grad_enabled = True
_finite_checks = True


@contextmanager
def no_grad():
    """Run ops without recording the graph (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks(enabled):
    """Toggle per-node finiteness validation (on by default)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode AD.

    ``data`` is immutable by convention once the node is created.  The
    adjoint lives in ``grad`` and is populated by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "node_id", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if _finite_checks and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in node '{op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def _acc(self):
        """Gradient buffer, allocated lazily."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def backward(self):
        """Populate adjoints of every upstream node that requires grad."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        order = topo_order(self)
        self._acc()[...] = 1.0
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the primitives below
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def topo_order(root):
    """Topological order of the sub-DAG that can carry gradient to ``root``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, op, parents, backward_fn):
    """Create an op output; prune the tape when no parent needs grad."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def bwd(g):
        if a.requires_grad:
            a._acc()[...] += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b._acc()[...] += _unbroadcast(g, b.data.shape)

    return _make(out, "add", (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def bwd(g):
        if a.requires_grad:
            a._acc()[...] += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b._acc()[...] += _unbroadcast(g * a.data, b.data.shape)

    return _make(out, "mul", (a, b), bwd)


def neg(a):
    a = _wrap(a)

    def bwd(g):
        if a.requires_grad:
            a._acc()[...] -= g

    return _make(-a.data, "neg", (a,), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._acc()[...] += g @ b.data.T
        if b.requires_grad:
            b._acc()[...] += a.data.T @ g

    return _make(out, "matmul", (a, b), bwd)


def linear(x, w, b=None):
    """Affine map over the last axis: x @ w (+ b)."""
    x, w = _wrap(x), _wrap(w)
    k = x.data.shape[-1]
    if w.data.ndim != 2 or w.data.shape[0] != k:
        raise ShapeError(f"linear: input width {k} vs weight {w.data.shape}")
    x2 = x.data.reshape(-1, k)
    out2 = x2 @ w.data
    if b is not None:
        b = _wrap(b)
        out2 = out2 + b.data
    out = out2.reshape(x.data.shape[:-1] + (w.data.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, w.data.shape[1])
        if x.requires_grad:
            x._acc()[...] += (g2 @ w.data.T).reshape(x.data.shape)
        if w.requires_grad:
            w._acc()[...] += x2.T @ g2
        if b is not None and b.requires_grad:
            b._acc()[...] += g2.sum(axis=0)

    return _make(out, "linear", parents, bwd)


def concat(tensors, axis=-1):
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.data.shape for t in ts]}") from None
    ax = axis % out.ndim
    sizes = [t.data.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.ndim
                idx[ax] = slice(lo, hi)
                t._acc()[...] += g[tuple(idx)]

    return _make(out, "concat", ts, bwd)


def narrow(t, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    t = _wrap(t)
    ax = axis % t.data.ndim
    if start < 0 or start + length > t.data.shape[ax]:
        raise ShapeError(f"narrow: [{start}:{start + length}] outside axis {ax} of {t.data.shape}")
    idx = [slice(None)] * t.data.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = t.data[idx].copy()

    def bwd(g):
        if t.requires_grad:
            t._acc()[idx] += g

    return _make(out, "narrow", (t,), bwd)


def reshape(t, shape):
    t = _wrap(t)
    out = t.data.reshape(shape)

    def bwd(g):
        if t.requires_grad:
            t._acc()[...] += g.reshape(t.data.shape)

    return _make(out, "reshape", (t,), bwd)


def tanh(t):
    t = _wrap(t)
    y = np.tanh(t.data)

    def bwd(g):
        if t.requires_grad:
            t._acc()[...] += g * (1.0 - y * y)

    return _make(y, "tanh", (t,), bwd)


def sigmoid(t):
    t = _wrap(t)
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-t.data))

    def bwd(g):
        if t.requires_grad:
            t._acc()[...] += g * y * (1.0 - y)

    return _make(y, "sigmoid", (t,), bwd)


def softmax(t, temperature=1.0, axis=-1, mask=None):
    """Temperature softmax with max-subtraction; optional 0/1 validity mask.

    Masked entries get probability exactly 0 and carry no gradient.
    """
    if temperature <= 0:
        raise GraphError(f"softmax temperature must be positive, got {temperature}")
    t = _wrap(t)
    z = t.data / temperature
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask {mask.shape} vs logits {z.shape}")
        if not (mask.sum(axis=axis) > 0).all():
            raise GraphError("softmax: a row is fully masked")
        zmax = np.where(mask > 0, z, -np.inf).max(axis=axis, keepdims=True)
        e = np.exp(np.where(mask > 0, z - zmax, -np.inf))
    else:
        e = np.exp(z - z.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if t.requires_grad:
            inner = (p * g).sum(axis=axis, keepdims=True)
            t._acc()[...] += p * (g - inner) / temperature

    return _make(p, "softmax", (t,), bwd)


def log(t):
    t = _wrap(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(t.data)

    def bwd(g):
        if t.requires_grad:
            t._acc()[...] += g / t.data

    return _make(y, "log", (t,), bwd)


def clamp_min(t, lo):
    t = _wrap(t)
    out = np.maximum(t.data, lo)
    passthrough = t.data > lo

    def bwd(g):
        if t.requires_grad:
            t._acc()[...] += g * passthrough

    return _make(out, "clamp_min", (t,), bwd)


def tsum(t, axis=None, keepdims=False):
    t = _wrap(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if t.requires_grad:
            if axis is None:
                t._acc()[...] += g
            elif keepdims:
                t._acc()[...] += g
            else:
                t._acc()[...] += np.expand_dims(g, axis=axis)

    return _make(out, "sum", (t,), bwd)


def tmean(t, axis=None, keepdims=False):
    t = _wrap(t)
    count = t.data.size if axis is None else t.data.shape[axis]
    out = t.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if t.requires_grad:
            if axis is None:
                t._acc()[...] += g / count
            elif keepdims:
                t._acc()[...] += g / count
            else:
                t._acc()[...] += np.expand_dims(g, axis=axis) / count

    return _make(out, "mean", (t,), bwd)


def cosine_similarity(u, v):
    """cos(u, v) over the last axis, batch axes broadcast.

    Each norm carries ``NORM_EPS`` inside the square root, so zero
    vectors yield 0 instead of dividing by zero.
    """
    u, v = _wrap(u), _wrap(v)
    try:
        ud, vd = np.broadcast_arrays(u.data, v.data)
    except ValueError:
        raise ShapeError(f"cosine: cannot broadcast {u.data.shape} with {v.data.shape}") from None
    s = (ud * vd).sum(axis=-1)
    nu = np.sqrt((ud * ud).sum(axis=-1) + NORM_EPS)
    nv = np.sqrt((vd * vd).sum(axis=-1) + NORM_EPS)
    c = s / (nu * nv)

    def bwd(g):
        gu = (g / (nu * nv))[..., None] * vd - (g * c / (nu * nu))[..., None] * ud
        gv = (g / (nu * nv))[..., None] * ud - (g * c / (nv * nv))[..., None] * vd
        if u.requires_grad:
            u._acc()[...] += _unbroadcast(gu, u.data.shape)
        if v.requires_grad:
            v._acc()[...] += _unbroadcast(gv, v.data.shape)

    return _make(c, "cosine", (u, v), bwd)


def take_rows(table, ids):
    """Differentiable row gather: out[i] = table[ids[i]]."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.intp)
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            np.add.at(table._acc(), ids, g)

    return _make(out, "take_rows", (table,), bwd)


def cross_entropy_from_log_probs(log_probs, target_ids, weights=None):
    """-sum_i w_i * log_probs[i, target_ids[i]] as a scalar node."""
    lp = _wrap(log_probs)
    if lp.data.ndim != 2:
        raise ShapeError(f"cross_entropy: log_probs must be 2-D, got {lp.data.shape}")
    ids = np.asarray(target_ids, dtype=np.intp)
    if ids.shape != (lp.data.shape[0],):
        raise ShapeError(f"cross_entropy: {ids.shape} targets for {lp.data.shape[0]} rows")
    w = np.ones(len(ids)) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(len(ids))
    out = -(w * lp.data[rows, ids]).sum()

    def bwd(g):
        if lp.requires_grad:
            buf = lp._acc()
            np.add.at(buf, (rows, ids), -float(g) * w)

    return _make(out, "cross_entropy", (lp,), bwd)


def gradient_check(f, point, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one Tensor to a scalar Tensor built from these primitives.
    Relative error per coordinate is |a - n| / max(1e-12, |a| + |n|).
    """
    if h <= 0:
        raise GraphError("gradient_check: step h must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    p = Tensor(x0.copy(), requires_grad=True)
    out = f(p)
    if out.data.size != 1:
        raise GraphError("gradient_check: function must return a scalar")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("gradient_check: non-finite function value")
    out.backward()
    analytic = np.zeros_like(x0) if p.grad is None else p.grad.copy()

    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        with no_grad():
            fp = float(f(Tensor((flat + bump).reshape(x0.shape))).data)
            fm = float(f(Tensor((flat - bump).reshape(x0.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("gradient_check: non-finite function value at perturbed point")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
