"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that records
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the tape once in reverse topological order.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy import special

from .sparse import SparseMatrix

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A node on the differentiation tape.

    Leaves created with ``requires_grad=True`` are parameters; their
    ``grad`` is filled in by :func:`backward`.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.grad = None
        self._backpropagated = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=back, op="add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, parents=(a,), backward_fn=lambda g: (-g,), op="neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=back, op="mul")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return Tensor(out, parents=(a,), backward_fn=lambda g: (-g * out * out,), op="reciprocal")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (0.5 * g / out,), op="sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, parents=(a,), backward_fn=lambda g: (2.0 * g * a.data,),
                  op="square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), parents=(a,),
                  backward_fn=lambda g: (g * mask,), op="relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g * out * (1.0 - out),),
                  op="sigmoid")


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = special.ndtr(x)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor(x * cdf, parents=(a,), backward_fn=back, op="gelu")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,),
                  backward_fn=back, op="sum")


def mean(a, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis) * (1.0 / n)


# ---------------------------------------------------------------- shape ops

def getitem(a, key) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        if _has_advanced(key):
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return Tensor(a.data[key], parents=(a,), backward_fn=back, op="getitem")


def _has_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def take_rows(a, index) -> Tensor:
    """Gather along the leading (node) axis; the backward pass scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        # scatter-add as a CSR incidence product: row i sums the g rows gathered from i
        n = a.shape[0]
        order = np.argsort(index, kind="stable")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(index, minlength=n), out=indptr[1:])
        scatter = sp.csr_matrix((np.ones(len(index)), order, indptr), shape=(n, len(index)))
        out = scatter @ g.reshape(len(index), math.prod(a.shape[1:]))
        return (np.asarray(out).reshape(a.shape),)

    return Tensor(np.take(a.data, index, axis=0), parents=(a,), backward_fn=back,
                  op="take_rows")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors),
                  backward_fn=back, op="concat")


def transpose(a, axes) -> Tensor:
    axes = tuple(axes)
    back_axes = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), parents=(a,),
                  backward_fn=lambda g: (np.transpose(g, back_axes),), op="transpose")


def reshape(a, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), parents=(a,),
                  backward_fn=lambda g: (g.reshape(old),), op="reshape")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or batched."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data
    return Tensor(out, parents=(a, b), backward_fn=back, op="matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape), ``w`` 2-D."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out += b.data

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = ((g2 @ w.data.T).reshape(x.shape), x2.T @ g2)
        return grads + (g2.sum(axis=0).reshape(b.shape),) if b is not None else grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out.reshape(*x.shape[:-1], w.shape[1]), parents=parents, backward_fn=back,
                  op="linear")


def left_matmul(m: np.ndarray, x) -> Tensor:
    """Constant matrix ``m`` applied to the leading (node) axis of ``x``."""
    m = np.asarray(m, dtype=np.float64)
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: {m.shape} applied to {x.shape}")
    rest = x.shape[1:]

    def apply(mat, v):
        return (mat @ v.reshape(v.shape[0], -1)).reshape(mat.shape[0], *rest)

    return Tensor(apply(m, x.data), parents=(x,), backward_fn=lambda g: (apply(m.T, g),),
                  op="left_matmul")


def _edge_inner_products(s: SparseMatrix, g: np.ndarray, d: np.ndarray,
                         block: int = 128) -> np.ndarray:
    """``out[e] = <g[row_e], d[col_e]>`` for every stored entry of ``s``.

    Rows are processed in blocks; each block multiplies against only the
    columns it touches, which keeps the work near O(nnz) for local graphs
    while running inside BLAS.
    """
    out = np.empty(s.nnz)
    indptr, cols = s.indptr, s.indices
    n = s.shape[0]
    for r0 in range(0, n, block):
        r1 = min(r0 + block, n)
        lo, hi = indptr[r0], indptr[r1]
        if lo == hi:
            continue
        ucols, inv = np.unique(cols[lo:hi], return_inverse=True)
        prod = g[r0:r1] @ d[ucols].T
        local_rows = np.repeat(np.arange(r1 - r0), np.diff(indptr[r0:r1 + 1]))
        out[lo:hi] = prod[local_rows, inv]
    return out


def spmm(s: SparseMatrix, d, values=None) -> Tensor:
    """Sparse-dense product ``S @ D`` over the leading (node) axis of ``d``.

    ``values`` optionally replaces the stored entries of ``s`` with a
    differentiable per-entry tensor (same sparsity pattern).
    """
    d = as_tensor(d)
    if s.shape[1] != d.shape[0]:
        raise ValueError(f"spmm shape mismatch: {s.shape} @ {d.shape}")
    vals = s.values if values is None else as_tensor(values).data
    if vals.shape != (s.nnz,):
        raise ValueError("values must provide one entry per stored element")
    mat = s.to_scipy() if values is None else \
        sp.csr_matrix((vals, s.indices, s.indptr), shape=s.shape)
    rest = d.shape[1:]
    dflat = d.data.reshape(d.shape[0], -1)
    out = np.asarray(mat @ dflat).reshape(s.shape[0], *rest)

    def back(g):
        gflat = g.reshape(g.shape[0], -1)
        gd = np.asarray(mat.T @ gflat).reshape(d.shape)
        if values is None:
            return (gd,)
        return gd, _edge_inner_products(s, gflat, dflat)

    parents = (d,) if values is None else (d, as_tensor(values))
    return Tensor(out, parents=parents, backward_fn=back, op="spmm")


def mode1_product(k, s) -> Tensor:
    """Per-frequency contraction ``out[p, ..., a] = sum_b K[p, a, b] * s[p, ..., b]``.

    ``s`` is [m, d] or [m, B, d] (frequency axis first).
    """
    k, s = as_tensor(k), as_tensor(s)
    if k.ndim != 3 or k.shape[1] != k.shape[2] or s.shape[0] != k.shape[0] \
            or s.shape[-1] != k.shape[2]:
        raise ValueError(f"mode-1 product shape mismatch: {k.shape} x {s.shape}")
    m, d = k.shape[0], k.shape[2]
    s3 = s.data.reshape(m, -1, d)
    kt = np.swapaxes(k.data, 1, 2)

    def back(g):
        g3 = g.reshape(m, -1, d)
        gk = np.matmul(np.swapaxes(g3, 1, 2), s3)
        gs = np.matmul(g3, k.data).reshape(s.shape)
        return gk, gs

    out = np.matmul(s3, kt).reshape(s.shape)
    return Tensor(out, parents=(k, s), backward_fn=back, op="mode1_product")


# ---------------------------------------------------------------- backward

def _topological_order(root: Tensor) -> list[Tensor]:
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("cycle detected in the differentiation tape")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if not p.requires_grad:
                continue
            pm = state.get(id(p))
            if pm == 1:
                raise RuntimeError("cycle detected in the differentiation tape")
            if pm is None:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Leaves listed in ``params`` that the loss never reaches get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backpropagated:
        raise RuntimeError("backward already called on this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any parameter")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    loss._backpropagated = True
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
