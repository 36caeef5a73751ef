"""Gather/scatter and batch-norm kernels behind the layer ops.

Every kernel has a numba implementation and a pure-numpy one. The numba path
is used unless numba is missing or ``FMGTELEOP_DISABLE_NUMBA=1`` is set in the
environment before import. The im2col/col2im pairs only move data and agree
bitwise. The batch-norm reductions sum in a different order (numba keeps
float64 accumulators), so those agree to rounding.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("FMGTELEOP_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def optional_njit(func):
    if NUMBA_AVAILABLE:
        return njit(cache=True)(func)
    return func


# -- 2D ---------------------------------------------------------------------

def im2col2d_numpy(xpad, kh, kw, sh, sw, oh, ow):
    """(N, C, Hp, Wp) -> (N*oh*ow, C*kh*kw) patch matrix."""
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im2d_numpy(cols, n, c, hp, wp, kh, kw, sh, sw, oh, ow):
    """Adjoint of :func:`im2col2d_numpy`; overlapping patches are summed."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw] += (
                c6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


@optional_njit
def im2col2d_numba(xpad, kh, kw, sh, sw, oh, ow):
    n, c = xpad.shape[0], xpad.shape[1]
    cols = np.empty((n * oh * ow, c * kh * kw), dtype=xpad.dtype)
    for b in range(n):
        for y in range(oh):
            for x in range(ow):
                r = (b * oh + y) * ow + x
                q = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[r, q] = xpad[b, ch, y * sh + i, x * sw + j]
                            q += 1
    return cols


@optional_njit
def col2im2d_numba(cols, n, c, hp, wp, kh, kw, sh, sw, oh, ow):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for y in range(oh):
                    for x in range(ow):
                        r = (b * oh + y) * ow + x
                        for ch in range(c):
                            out[b, ch, y * sh + i, x * sw + j] += cols[r, (ch * kh + i) * kw + j]
    return out


# -- batch normalization ----------------------------------------------------------
# Arrays are viewed as (N, C, S): channel axis 1, everything else reduced.

def bn_moments_numpy(x3):
    m = x3.shape[0] * x3.shape[2]
    mean = np.einsum("ncs->c", x3) / m
    centered = x3 - mean[None, :, None]
    var = np.einsum("ncs,ncs->c", centered, centered) / m
    return mean.astype(x3.dtype), var.astype(x3.dtype)


def bn_normalize_numpy(x3, mean, inv, scale, shift):
    xhat = (x3 - mean[None, :, None]) * inv[None, :, None]
    return xhat, xhat * scale[None, :, None] + shift[None, :, None]


def bn_backward_numpy(g3, xhat3, k, m):
    gshift = np.einsum("ncs->c", g3)
    gscale = np.einsum("ncs,ncs->c", g3, xhat3)
    gx = k[None, :, None] * (m * g3 - gshift[None, :, None] - xhat3 * gscale[None, :, None])
    return gx, gscale, gshift


@optional_njit
def bn_moments_numba(x3):
    n, c, s = x3.shape
    m = n * s
    mean = np.empty(c, dtype=x3.dtype)
    var = np.empty(c, dtype=x3.dtype)
    for ch in range(c):
        acc = 0.0
        for b in range(n):
            for i in range(s):
                acc += x3[b, ch, i]
        mu = acc / m
        acc = 0.0
        for b in range(n):
            for i in range(s):
                dv = x3[b, ch, i] - mu
                acc += dv * dv
        mean[ch] = mu
        var[ch] = acc / m
    return mean, var


@optional_njit
def bn_normalize_numba(x3, mean, inv, scale, shift):
    n, c, s = x3.shape
    xhat = np.empty_like(x3)
    out = np.empty_like(x3)
    for b in range(n):
        for ch in range(c):
            mu, iv, sc, sh = mean[ch], inv[ch], scale[ch], shift[ch]
            for i in range(s):
                v = (x3[b, ch, i] - mu) * iv
                xhat[b, ch, i] = v
                out[b, ch, i] = v * sc + sh
    return xhat, out


@optional_njit
def bn_backward_numba(g3, xhat3, k, m):
    n, c, s = g3.shape
    gshift = np.zeros(c, dtype=g3.dtype)
    gscale = np.zeros(c, dtype=g3.dtype)
    gx = np.empty_like(g3)
    for ch in range(c):
        a0 = 0.0
        a1 = 0.0
        for b in range(n):
            for i in range(s):
                a0 += g3[b, ch, i]
                a1 += g3[b, ch, i] * xhat3[b, ch, i]
        gshift[ch] = a0
        gscale[ch] = a1
    for b in range(n):
        for ch in range(c):
            kk, s0, s1 = k[ch], gshift[ch], gscale[ch]
            for i in range(s):
                gx[b, ch, i] = kk * (m * g3[b, ch, i] - s0 - xhat3[b, ch, i] * s1)
    return gx, gscale, gshift


if USE_NUMBA:
    im2col2d, col2im2d = im2col2d_numba, col2im2d_numba
    bn_moments, bn_normalize, bn_backward = bn_moments_numba, bn_normalize_numba, bn_backward_numba
else:
    im2col2d, col2im2d = im2col2d_numpy, col2im2d_numpy
    bn_moments, bn_normalize, bn_backward = bn_moments_numpy, bn_normalize_numpy, bn_backward_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
