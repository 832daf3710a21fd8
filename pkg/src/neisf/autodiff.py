"""Reverse-mode automatic differentiation on numpy arrays.

A Tape records every operation in execution order; since execution order is
already topological, the backward pass is a single reverse sweep that visits
each record exactly once.  Variables hold ndarrays of any shape, so the whole
ray batch travels through one graph instead of one graph per scalar.

Only the operations this pipeline needs are provided (MLP layers, Fresnel and
microfacet terms, Stokes rotations, volume blending, losses).  Everything
supports numpy broadcasting; gradients of broadcast operands are summed back
to the operand shape.
"""

from __future__ import annotations

import numpy as np


class Tape:
    """Operation record for one forward pass."""

    def __init__(self):
        self._records = []  # (out Var, backward closure)
        self._leaves = []

    @property
    def node_count(self):
        return len(self._records)

    def var(self, data, requires_grad=True):
        v = Var(np.asarray(data), self, requires_grad=requires_grad)
        self._leaves.append(v)
        return v

    def const(self, data):
        return Var(np.asarray(data), self, requires_grad=False)

    def _record(self, out, backward):
        if out.requires_grad:
            self._records.append((out, backward))

    def backward(self, loss, grad=None):
        """Accumulate d(loss)/d(v) into v.grad for every upstream variable."""
        if grad is None:
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.data.dtype)
        for out, bw in reversed(self._records):
            if out.grad is not None:
                bw(out.grad)

    def zero_grad(self):
        for out, _ in self._records:
            out.grad = None
        for v in self._leaves:
            v.grad = None

    def reset(self):
        """Drop recorded operations but keep leaf variables (parameters).

        Call between optimization steps; otherwise the record list grows
        without bound and backward cost becomes cumulative.
        """
        self._records.clear()
        for v in self._leaves:
            v.grad = None


class Var:
    """An ndarray plus a gradient slot, attached to a tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    # make ndarray <op> Var defer to the reflected methods below instead of
    # numpy broadcasting over the object
    __array_ufunc__ = None

    def __init__(self, data, tape, requires_grad=True):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Var(self.data, self.tape, requires_grad=False)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    # -- operator sugar -------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _lift(x, like):
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=like.data.dtype), like.tape, requires_grad=False)


def _binary(a, b):
    if isinstance(a, Var):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    return a, b


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = _binary(a, b)
    out = Var(a.data + b.data, a.tape, a.requires_grad or b.requires_grad)

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    a.tape._record(out, bw)
    return out


def sub(a, b):
    a, b = _binary(a, b)
    out = Var(a.data - b.data, a.tape, a.requires_grad or b.requires_grad)

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    a.tape._record(out, bw)
    return out


def mul(a, b):
    a, b = _binary(a, b)
    out = Var(a.data * b.data, a.tape, a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def bw(g):
        a._accum(_unbroadcast(g * bd, ad.shape))
        b._accum(_unbroadcast(g * ad, bd.shape))

    a.tape._record(out, bw)
    return out


def div(a, b):
    a, b = _binary(a, b)
    out = Var(a.data / b.data, a.tape, a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def bw(g):
        a._accum(_unbroadcast(g / bd, ad.shape))
        b._accum(_unbroadcast(-g * ad / (bd * bd), bd.shape))

    a.tape._record(out, bw)
    return out


def power(a, k):
    """a ** k for a constant scalar exponent k."""
    kf = float(k)
    out = Var(a.data ** kf, a.tape, a.requires_grad)
    ad = a.data

    def bw(g):
        a._accum(g * kf * ad ** (kf - 1.0))

    a.tape._record(out, bw)
    return out


def matmul(a, b):
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    # batched-lhs by plain-matrix is the hot pattern; one flat GEMM beats a
    # strided batch of tiny products by an order of magnitude
    flat = ad.ndim > 2 and bd.ndim == 2
    if flat:
        out_data = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out_data = np.matmul(ad, bd)
    out = Var(out_data, a.tape, a.requires_grad or b.requires_grad)

    def bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accum((g2 @ bd.T).reshape(ad.shape))
            if b.requires_grad:
                b._accum(ad.reshape(-1, ad.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            a._accum(_unbroadcast(ga, ad.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            b._accum(_unbroadcast(gb, bd.shape))

    a.tape._record(out, bw)
    return out


# -- elementwise nonlinearities -----------------------------------------

def exp(a):
    od = np.exp(a.data)
    out = Var(od, a.tape, a.requires_grad)

    def bw(g):
        a._accum(g * od)

    a.tape._record(out, bw)
    return out


def log(a):
    out = Var(np.log(a.data), a.tape, a.requires_grad)
    ad = a.data

    def bw(g):
        a._accum(g / ad)

    a.tape._record(out, bw)
    return out


def sqrt(a):
    od = np.sqrt(a.data)
    out = Var(od, a.tape, a.requires_grad)

    def bw(g):
        a._accum(g * 0.5 / od)

    a.tape._record(out, bw)
    return out


def sin(a):
    out = Var(np.sin(a.data), a.tape, a.requires_grad)
    ad = a.data

    def bw(g):
        a._accum(g * np.cos(ad))

    a.tape._record(out, bw)
    return out


def cos(a):
    out = Var(np.cos(a.data), a.tape, a.requires_grad)
    ad = a.data

    def bw(g):
        a._accum(-g * np.sin(ad))

    a.tape._record(out, bw)
    return out


def tanh(a):
    od = np.tanh(a.data)
    out = Var(od, a.tape, a.requires_grad)

    def bw(g):
        a._accum(g * (1.0 - od * od))

    a.tape._record(out, bw)
    return out


def arctan2(y, x):
    """Signed angle of (x, y); either argument may be a plain array."""
    tape = y.tape if isinstance(y, Var) else x.tape
    y = y if isinstance(y, Var) else tape.const(np.asarray(y))
    x = x if isinstance(x, Var) else tape.const(np.asarray(x))
    out = Var(np.arctan2(y.data, x.data), tape, y.requires_grad or x.requires_grad)
    yd, xd = y.data, x.data
    r2 = np.maximum(yd * yd + xd * xd, 1e-300)

    def bw(g):
        y._accum(g * xd / r2)
        x._accum(-g * yd / r2)

    tape._record(out, bw)
    return out


def sigmoid(a):
    od = 1.0 / (1.0 + np.exp(-a.data))
    out = Var(od, a.tape, a.requires_grad)

    def bw(g):
        a._accum(g * od * (1.0 - od))

    a.tape._record(out, bw)
    return out


def softplus(a, beta=1.0):
    """log(1 + exp(beta x)) / beta, overflow-safe."""
    z = beta * a.data
    od = (np.logaddexp(0.0, z) / beta).astype(a.data.dtype)
    out = Var(od, a.tape, a.requires_grad)

    def bw(g):
        a._accum(g / (1.0 + np.exp(-z)))

    a.tape._record(out, bw)
    return out


def relu(a):
    mask = a.data > 0
    out = Var(np.where(mask, a.data, 0.0).astype(a.data.dtype), a.tape, a.requires_grad)

    def bw(g):
        a._accum(g * mask)

    a.tape._record(out, bw)
    return out


def absval(a):
    s = np.sign(a.data)
    out = Var(np.abs(a.data), a.tape, a.requires_grad)

    def bw(g):
        a._accum(g * s)

    a.tape._record(out, bw)
    return out


def maximum(a, b):
    a, b = _binary(a, b)
    mask = a.data >= b.data
    out = Var(np.where(mask, a.data, b.data), a.tape, a.requires_grad or b.requires_grad)

    def bw(g):
        a._accum(_unbroadcast(g * mask, a.data.shape))
        b._accum(_unbroadcast(g * ~mask, b.data.shape))

    a.tape._record(out, bw)
    return out


def minimum(a, b):
    a, b = _binary(a, b)
    mask = a.data <= b.data
    out = Var(np.where(mask, a.data, b.data), a.tape, a.requires_grad or b.requires_grad)

    def bw(g):
        a._accum(_unbroadcast(g * mask, a.data.shape))
        b._accum(_unbroadcast(g * ~mask, b.data.shape))

    a.tape._record(out, bw)
    return out


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def where(cond, a, b):
    """cond is a plain boolean ndarray (not differentiated)."""
    cond = np.asarray(cond)
    a, b = _binary(a, b)
    out = Var(np.where(cond, a.data, b.data), a.tape, a.requires_grad or b.requires_grad)

    def bw(g):
        a._accum(_unbroadcast(g * cond, a.data.shape))
        b._accum(_unbroadcast(g * ~cond, b.data.shape))

    a.tape._record(out, bw)
    return out


# -- reductions and shape -----------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = Var(a.data.sum(axis=axis, keepdims=keepdims), a.tape, a.requires_grad)
    shape = a.data.shape

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, shape).copy() if np.ndim(g) else np.full(shape, g, dtype=a.data.dtype))
            return
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        a._accum(np.broadcast_to(gx, shape))

    a.tape._record(out, bw)
    return out


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(a, axis):
    out = Var(np.cumsum(a.data, axis=axis), a.tape, a.requires_grad)

    def bw(g):
        gr = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        a._accum(gr)

    a.tape._record(out, bw)
    return out


def reshape(a, shape):
    out = Var(a.data.reshape(shape), a.tape, a.requires_grad)
    orig = a.data.shape

    def bw(g):
        a._accum(g.reshape(orig))

    a.tape._record(out, bw)
    return out


def getitem(a, idx):
    out = Var(a.data[idx], a.tape, a.requires_grad)
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        a._accum(full)

    a.tape._record(out, bw)
    return out


def concat(vs, axis):
    vs = list(vs)
    tape = vs[0].tape
    out = Var(np.concatenate([v.data for v in vs], axis=axis), tape,
              any(v.requires_grad for v in vs))
    sizes = [v.data.shape[axis] for v in vs]
    split = np.cumsum(sizes)[:-1]

    def bw(g):
        for v, gpart in zip(vs, np.split(g, split, axis=axis)):
            v._accum(gpart)

    tape._record(out, bw)
    return out


def stack(vs, axis):
    vs = list(vs)
    tape = vs[0].tape
    out = Var(np.stack([v.data for v in vs], axis=axis), tape,
              any(v.requires_grad for v in vs))

    def bw(g):
        for i, v in enumerate(vs):
            v._accum(np.take(g, i, axis=axis))

    tape._record(out, bw)
    return out
