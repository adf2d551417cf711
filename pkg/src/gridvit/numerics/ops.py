"""Differentiable array operations.

Every op accepts numpy arrays or :class:`Var` inputs. Outside an active tape
the result is a plain array; under a tape it is a recorded ``Var``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from ..errors import DimensionError, ValidationError
from .autodiff import ArrayLike, Var, make_output, unbroadcast, value_of

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _push(x, g):
    if isinstance(x, Var):
        x.accumulate(unbroadcast(g, x.shape))


# -- elementwise -------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike):
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def backward(g):
        _push(a, g)
        _push(b, g)

    return make_output(out, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike):
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def backward(g):
        _push(a, g * bv)
        _push(b, g * av)

    return make_output(out, (a, b), backward)


def scale(x: ArrayLike, c: float):
    xv = value_of(x)
    c = xv.dtype.type(c)
    out = xv * c

    def backward(g):
        _push(x, g * c)

    return make_output(out, (x,), backward)


def total(x: ArrayLike):
    """Sum of all entries, as a 0-d array."""
    xv = value_of(x)
    out = np.asarray(xv.sum(), dtype=xv.dtype)

    def backward(g):
        _push(x, np.broadcast_to(g, xv.shape).astype(xv.dtype))

    return make_output(out, (x,), backward)


def gelu(x: ArrayLike):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    xv = value_of(x)
    cdf = 0.5 * (1.0 + erf(xv * _SQRT_HALF))
    out = (xv * cdf).astype(xv.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        _push(x, (g * (cdf + xv * pdf)).astype(xv.dtype, copy=False))

    return make_output(out, (x,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike):
    """Matrix product over the last two axes, broadcasting leading axes."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(
            f"matmul: cannot multiply shapes {av.shape} and {bv.shape}"
        )
    out = av @ bv

    def backward(g):
        if isinstance(a, Var):
            a.accumulate(unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape))
        if isinstance(b, Var):
            if bv.ndim == 2:
                # fold the leading axes of a into one big GEMM
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            b.accumulate(gb)

    return make_output(out, (a, b), backward)


def linear(x: ArrayLike, w: ArrayLike, b: ArrayLike):
    """``x @ w + b`` with ``b`` broadcast over rows."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    if xv.shape[-1:] != wv.shape[:1] or wv.ndim != 2 or bv.shape != wv.shape[1:]:
        raise DimensionError(
            f"linear: x {xv.shape}, w {wv.shape}, b {bv.shape} do not conform"
        )
    return add(matmul(x, w), b)


# -- normalisation / probabilities ------------------------------------------


def softmax(x: ArrayLike, axis: int = -1):
    xv = value_of(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _push(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make_output(y, (x,), backward)


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-6):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    xv, gv, bv = value_of(x), value_of(gamma), value_of(beta)
    d = xv.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gv.shape} / beta {bv.shape} vs last axis {d}"
        )
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gv + bv

    def backward(g):
        if isinstance(x, Var):
            dxhat = g * gv
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            x.accumulate(dx)
        lead = tuple(range(g.ndim - 1))
        if isinstance(gamma, Var):
            gamma.accumulate((g * xhat).sum(axis=lead))
        if isinstance(beta, Var):
            beta.accumulate(g.sum(axis=lead))

    return make_output(out, (x, gamma, beta), backward)


def cross_entropy(logits: ArrayLike, labels) -> "np.ndarray | Var":
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    lv = value_of(logits)
    labels = np.asarray(labels)
    if lv.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, classes] logits, got {lv.shape}")
    n, c = lv.shape
    if n < 1 or labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} does not match batch {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"label out of range [0, {c}): {labels.tolist()}")
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=lv.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _push(logits, p * (g / n))

    return make_output(loss, (logits,), backward)


# -- shape plumbing ----------------------------------------------------------


def reshape(x: ArrayLike, shape):
    xv = value_of(x)
    out = xv.reshape(shape)

    def backward(g):
        _push(x, g.reshape(xv.shape))

    return make_output(out, (x,), backward)


def transpose(x: ArrayLike, axes: Sequence[int]):
    xv = value_of(x)
    axes = tuple(axes)
    out = np.transpose(xv, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _push(x, np.transpose(g, inverse))

    return make_output(out, (x,), backward)


def broadcast_to(x: ArrayLike, shape):
    xv = value_of(x)
    out = np.broadcast_to(xv, shape)

    def backward(g):
        _push(x, g)

    return make_output(out, (x,), backward)


def concat(xs: Sequence[ArrayLike], axis: int):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
            _push(x, piece)

    return make_output(out, tuple(xs), backward)


def take(x: ArrayLike, index: int, axis: int):
    """Select one position along ``axis`` (the axis is dropped)."""
    xv = value_of(x)
    out = np.take(xv, index, axis=axis)

    def backward(g):
        if isinstance(x, Var):
            full = np.zeros_like(xv)
            sl = [slice(None)] * xv.ndim
            sl[axis] = index
            full[tuple(sl)] = g
            x.accumulate(full)

    return make_output(out, (x,), backward)
