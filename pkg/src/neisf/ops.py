"""Numeric helpers that work on both plain ndarrays and autodiff Vars.

The Fresnel / microfacet / rotation formulas are written once against this
module; the ground-truth tracer calls them with ndarrays and the
differentiable renderer calls them with tape variables.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def _is_var(x):
    return isinstance(x, ad.Var)


def sqrt(x):
    return ad.sqrt(x) if _is_var(x) else np.sqrt(x)


def exp(x):
    return ad.exp(x) if _is_var(x) else np.exp(x)


def absval(x):
    return ad.absval(x) if _is_var(x) else np.abs(x)


def maximum(a, b):
    if _is_var(a) or _is_var(b):
        return ad.maximum(a, b)
    return np.maximum(a, b)


def minimum(a, b):
    if _is_var(a) or _is_var(b):
        return ad.minimum(a, b)
    return np.minimum(a, b)


def clip(x, lo, hi):
    return ad.clip(x, lo, hi) if _is_var(x) else np.clip(x, lo, hi)


def where(cond, a, b):
    if _is_var(a) or _is_var(b):
        return ad.where(cond, a, b)
    return np.where(cond, a, b)


def stack(parts, axis):
    if any(_is_var(p) for p in parts):
        tape = next(p.tape for p in parts if _is_var(p))
        parts = [p if _is_var(p) else tape.const(p) for p in parts]
        return ad.stack(parts, axis)
    return np.stack(parts, axis)


def raw(x):
    """The underlying ndarray (identity for ndarrays)."""
    return x.data if _is_var(x) else np.asarray(x)


def vdot(a, b, keepdims=False):
    """Dot product over the last axis for (...,3) vectors."""
    if _is_var(a) or _is_var(b):
        s = ad.sum_(a * b, axis=-1, keepdims=keepdims)
        return s
    return np.sum(a * b, axis=-1, keepdims=keepdims)


def cross(a, b):
    """Cross product over the last axis for (...,3) vectors."""
    if _is_var(a) or _is_var(b):
        if not _is_var(a):
            a = b.tape.const(a)
        if not _is_var(b):
            b = a.tape.const(b)
        ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
        bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
        return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], -1)
    return np.cross(a, b)


def norm(a, keepdims=False, eps=0.0):
    n2 = vdot(a, a, keepdims=keepdims)
    if eps:
        n2 = maximum(n2, eps * eps)
    return sqrt(n2)


def normalize(a, eps=1e-12):
    if _is_var(a):
        n = norm(a, keepdims=True, eps=eps)
        return a / n
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(n, eps)


def log(x):
    return ad.log(x) if _is_var(x) else np.log(x)


def sin(x):
    return ad.sin(x) if _is_var(x) else np.sin(x)


def cos(x):
    return ad.cos(x) if _is_var(x) else np.cos(x)


def arctan2(y, x):
    if _is_var(y) or _is_var(x):
        return ad.arctan2(y, x)
    return np.arctan2(y, x)


def sum_(x, axis=None, keepdims=False):
    if _is_var(x):
        return ad.sum_(x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    if _is_var(x):
        return ad.mean(x, axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def cumsum(x, axis):
    return ad.cumsum(x, axis) if _is_var(x) else np.cumsum(x, axis=axis)


def concat(parts, axis):
    if any(_is_var(p) for p in parts):
        tape = next(p.tape for p in parts if _is_var(p))
        parts = [p if _is_var(p) else tape.const(np.asarray(p)) for p in parts]
        return ad.concat(parts, axis)
    return np.concatenate(parts, axis=axis)
