"""Differentiable operations.

Inputs may carry a leading batch axis. Shapes follow the NCHW / NCT
conventions: ``conv2d`` takes ``(N, C, H, W)``, ``conv1d_dilated_causal``
takes ``(N, C, T)``. Unbatched inputs (one rank lower) are accepted and
returned unbatched.
"""

from functools import lru_cache

import numpy as np
from scipy.special import expit

from . import kernels
from .tensor import Tensor, as_tensor, result

__all__ = [
    "add", "affine", "batchnorm", "concat", "conv1d_dilated_causal", "conv2d",
    "conv2d_transposed", "dense", "index_axis1", "lstm_cell", "mse_loss",
    "relu", "reshape", "slice_last", "transpose",
]


def _pad_hw(x, ph, pw):
    if not (ph or pw):
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def _chan_sum(a):
    """Sum over every axis except 1."""
    if a.ndim == 2:
        return a.sum(axis=0)
    return np.einsum("ncs->c", a.reshape(a.shape[0], a.shape[1], -1))


# Convolutions whose dense operator has at most this many entries are run as
# one matrix product instead of im2col (tiny grids such as 4x7).
UNROLL_LIMIT = 1 << 20


@lru_cache(maxsize=64)
def _unroll_index(ci, h, w, co, kh, kw, sh, sw, ph, pw, oh, ow):
    """Sparse structure of the dense conv2d operator (rows: input, cols: output)."""
    o, c, y, x, i, j = np.meshgrid(np.arange(co), np.arange(ci), np.arange(oh), np.arange(ow),
                                   np.arange(kh), np.arange(kw), indexing="ij")
    yi, xi = y * sh - ph + i, x * sw - pw + j
    ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    rows = ((c * h + yi) * w + xi)[ok]
    cols = ((o * oh + y) * ow + x)[ok]
    kidx = (((o * ci + c) * kh + i) * kw + j)[ok]
    return rows, cols, kidx


def _unrolled(W, geom):
    rows, cols, kidx = _unroll_index(*geom)
    ci, h, w, co, _, _, _, _, _, _, oh, ow = geom
    T = np.zeros((ci * h * w, co * oh * ow), dtype=W.dtype)
    T[rows, cols] = W.reshape(-1)[kidx]
    return T


def _unrolled_grad(dT, W, geom):
    rows, cols, kidx = _unroll_index(*geom)
    return np.bincount(kidx, weights=dT[rows, cols], minlength=W.size).astype(W.dtype).reshape(W.shape)


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# -- structural ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return result(a.data + b.data, (a, b), lambda g: (g, g))


def affine(x, scale, shift):
    """``x * scale + shift`` for constant scalars."""
    x = as_tensor(x)
    s = x.dtype.type(scale)
    return result(x.data * s + x.dtype.type(shift), (x,), lambda g: (g * s,))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def slice_last(x, start, stop):
    """``x[..., start:stop]``."""
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        out[..., start:stop] = g
        return (out,)

    return result(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward)


def index_axis1(x, i):
    """``x[:, i]`` (used to pick one timestep)."""
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, i] = g
        return (out,)

    return result(np.ascontiguousarray(x.data[:, i]), (x,), backward)


# -- layers -------------------------------------------------------------------

def dense(x, W, b=None):
    """``W @ x + b`` over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense: input width {x.shape[-1]} does not match weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"dense: bias shape {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        gx = g @ W.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gW = g2.T @ x2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return result(out, parents, backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return result(np.maximum(x.data, 0, dtype=x.dtype), (x,), lambda g: (g * mask,))


def _conv_geometry(xshape, wshape, stride, padding):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    _, c, h, w = xshape
    co, _, kh, kw = wshape
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError("conv2d: kernel larger than padded input")
    if (hp - kh) % sh or (wp - kw) % sw:
        raise ValueError("conv2d: stride does not tile the padded input exactly")
    oh, ow = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    return (c, h, w, co, kh, kw, sh, sw, ph, pw, oh, ow)


def _use_unrolled(geom):
    c, h, w, co, *_, oh, ow = geom
    return c * h * w * co * oh * ow <= UNROLL_LIMIT


def _conv2d_forward(xd, Wd, geom):
    """Returns (N, co, oh, ow) output and a context for the backward pass."""
    c, h, w, co, kh, kw, sh, sw, ph, pw, oh, ow = geom
    n = xd.shape[0]
    if _use_unrolled(geom):
        T = _unrolled(Wd, geom)
        x2 = xd.reshape(n, -1)
        return (x2 @ T).reshape(n, co, oh, ow), ("unrolled", T, x2)
    cols = kernels.im2col2d(_pad_hw(xd, ph, pw), kh, kw, sh, sw, oh, ow)
    wm = Wd.reshape(co, -1)
    out = (cols @ wm.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), ("im2col", wm, cols)


def _conv2d_backward(g, Wd, geom, ctx, need_x, need_w):
    """Gradients of a conv2d output ``g`` (N, co, oh, ow) w.r.t. input and kernel."""
    c, h, w, co, kh, kw, sh, sw, ph, pw, oh, ow = geom
    n = g.shape[0]
    gx = gW = None
    if ctx[0] == "unrolled":
        _, T, x2 = ctx
        g2 = g.reshape(n, -1)
        if need_x:
            gx = (g2 @ T.T).reshape(n, c, h, w)
        if need_w:
            gW = _unrolled_grad(x2.T @ g2, Wd, geom)
        return gx, gW
    _, wm, cols = ctx
    gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
    if need_x:
        gpad = kernels.col2im2d(np.ascontiguousarray(gm @ wm), n, c, h + 2 * ph, w + 2 * pw,
                                kh, kw, sh, sw, oh, ow)
        gx = gpad[:, :, ph : ph + h, pw : pw + w]
    if need_w:
        gW = (gm.T @ cols).reshape(Wd.shape)
    return gx, gW


def conv2d(x, W, b=None, stride=1, padding=0):
    """Cross-correlation with zero padding. ``W`` is ``(C_out, C_in, kh, kw)``.

    Output extent per axis is ``(H + 2p - k) / s + 1``, which must be integral.
    """
    x, W = as_tensor(x), as_tensor(W)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or W.ndim != 4 or xd.shape[1] != W.shape[1]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and kernel {W.shape}")
    geom = _conv_geometry(xd.shape, W.shape, stride, padding)
    out, ctx = _conv2d_forward(xd, W.data, geom)
    if b is not None:
        b = as_tensor(b)
        out += b.data[None, :, None, None]
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g4 = g[None] if unbatched else g
        gx, gW = _conv2d_backward(g4, W.data, geom, ctx, x.requires_grad, W.requires_grad)
        if gx is not None and unbatched:
            gx = gx[0]
        if b is None:
            return gx, gW
        return gx, gW, _chan_sum(g4)

    return result(out[0] if unbatched else out, parents, backward)


def conv2d_transposed(x, W, b=None, stride=1, padding=0):
    """Adjoint of :func:`conv2d` w.r.t. its input. ``W`` is ``(C_in, C_out, kh, kw)``.

    Output extent is ``(H - 1) * s - 2 * p + k`` per spatial axis.
    """
    x, W = as_tensor(x), as_tensor(W)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or W.ndim != 4 or xd.shape[1] != W.shape[0]:
        raise ValueError(f"conv2d_transposed: incompatible input {x.shape} and kernel {W.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, ci, h, w = xd.shape
    _, co, kh, kw = W.shape
    oh, ow = (h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw
    if oh < 1 or ow < 1:
        raise ValueError("conv2d_transposed: padding removes the whole output")
    # The matching forward conv maps (co, oh, ow) -> (ci, h, w) with the same kernel array.
    geom = _conv_geometry((n, co, oh, ow), (ci, co, kh, kw), (sh, sw), (ph, pw))
    if _use_unrolled(geom):
        T = _unrolled(W.data, geom)
        x2 = xd.reshape(n, -1)
        out = (x2 @ T.T).reshape(n, co, oh, ow)
    else:
        xm = xd.transpose(0, 2, 3, 1).reshape(-1, ci)
        wm = W.data.reshape(ci, -1)
        full = kernels.col2im2d(np.ascontiguousarray(xm @ wm), n, co, oh + 2 * ph, ow + 2 * pw,
                                kh, kw, sh, sw, h, w)
        out = np.ascontiguousarray(full[:, :, ph : ph + oh, pw : pw + ow])
    if b is not None:
        b = as_tensor(b)
        out += b.data[None, :, None, None]
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g4 = g[None] if unbatched else g
        gx = gW = None
        if _use_unrolled(geom):
            g2 = g4.reshape(n, -1)
            if x.requires_grad:
                gx = (g2 @ T).reshape(n, ci, h, w)
            if W.requires_grad:
                gW = _unrolled_grad(g2.T @ x2, W.data, geom)
        else:
            gcols = kernels.im2col2d(_pad_hw(g4, ph, pw), kh, kw, sh, sw, h, w)
            if x.requires_grad:
                gx = (gcols @ wm.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2)
            if W.requires_grad:
                gW = (xm.T @ gcols).reshape(W.shape)
        if gx is not None and unbatched:
            gx = gx[0]
        if b is None:
            return gx, gW
        return gx, gW, _chan_sum(g4)

    return result(out[0] if unbatched else out, parents, backward)


def conv1d_dilated_causal(x, W, b=None, dilation=1):
    """Causal dilated convolution, ``W`` is ``(C_out, C_in, k)``.

    ``y[t] = sum_j W[:, :, j] @ x[t - (k - 1 - j) * dilation]`` with zeros
    before the start of the sequence, so the output keeps length ``T``.

    The batch is laid out time-major as one long sequence in which every
    sample is preceded by ``(k - 1) * dilation`` zeros; each tap is then a
    single matrix product on a shifted view. Rows that would straddle two
    samples land in the padding slots and are discarded.
    """
    x, W = as_tensor(x), as_tensor(W)
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or W.ndim != 3 or xd.shape[1] != W.shape[1]:
        raise ValueError(f"conv1d_dilated_causal: incompatible input {x.shape} and kernel {W.shape}")
    d = int(dilation)
    if d < 1:
        raise ValueError("dilation must be >= 1")
    n, c, t = xd.shape
    co, _, k = W.shape
    left = (k - 1) * d
    tl = t + left
    rows = n * tl - left
    xl = np.zeros((n, tl, c), dtype=xd.dtype)
    xl[:, left:] = xd.transpose(0, 2, 1)
    xf = xl.reshape(-1, c)
    taps = np.ascontiguousarray(W.data.transpose(2, 1, 0))  # (k, c, co)
    of = np.zeros((n * tl, co), dtype=np.result_type(xd, W.data))
    for j in range(k):
        of[:rows] += xf[j * d : j * d + rows] @ taps[j]
    if b is not None:
        b = as_tensor(b)
        of += b.data
    out = np.ascontiguousarray(of.reshape(n, tl, co)[:, :t].transpose(0, 2, 1))
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g3 = g[None] if unbatched else g
        gl = np.zeros((n, tl, co), dtype=g3.dtype)
        gl[:, :t] = g3.transpose(0, 2, 1)
        gf = gl.reshape(-1, co)[:rows]
        gx = gW = None
        if x.requires_grad:
            wk = np.ascontiguousarray(W.data.transpose(2, 0, 1))  # (k, co, c)
            gxf = np.zeros((n * tl, c), dtype=gf.dtype)
            for j in range(k):
                gxf[j * d : j * d + rows] += gf @ wk[j]
            gx = gxf.reshape(n, tl, c)[:, left:].transpose(0, 2, 1)
            gx = gx[0] if unbatched else gx
        if W.requires_grad:
            gW = np.empty(W.shape, dtype=gf.dtype)
            for j in range(k):
                gW[:, :, j] = gf.T @ xf[j * d : j * d + rows]
        if b is None:
            return gx, gW
        return gx, gW, gf.sum(axis=0)

    return result(out[0] if unbatched else out, parents, backward)


def batchnorm(x, scale, shift, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over every axis except axis 1.

    ``running_mean`` and ``running_var`` are plain arrays updated in place
    when ``training`` is true (variance update uses the unbiased estimate).
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xd = x.data
    x3 = np.ascontiguousarray(xd).reshape(xd.shape[0], xd.shape[1], -1)
    dt = xd.dtype.type
    m = x3.shape[0] * x3.shape[2]
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batchnorm: training mode needs a batch of at least 2")
        mean, var = kernels.bn_moments(x3)
        mom = running_mean.dtype.type(momentum)
        running_mean *= 1 - mom
        running_mean += mom * mean.astype(running_mean.dtype)
        running_var *= 1 - mom
        running_var += mom * (var * (m / (m - 1))).astype(running_var.dtype)
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
    xhat3, out3 = kernels.bn_normalize(x3, mean, inv, scale.data.astype(xd.dtype), shift.data.astype(xd.dtype))

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(x3.shape)
        if training:
            # d/dx of scale * xhat with batch statistics
            k = ((scale.data * inv) / dt(m)).astype(g3.dtype)
            gx, gscale, gshift = kernels.bn_backward(g3, xhat3, k, dt(m))
        else:
            gshift = np.einsum("ncs->c", g3)
            gscale = np.einsum("ncs,ncs->c", g3, xhat3)
            gx = g3 * (scale.data * inv)[None, :, None]
        return gx.reshape(xd.shape), gscale, gshift

    return result(out3.reshape(xd.shape), (x, scale, shift), backward)


def lstm_cell(x, h_prev, c_prev, W_x, W_h, b):
    """One LSTM step, gate order (input, forget, candidate, output).

    ``W_x`` is ``(4H, I)``, ``W_h`` is ``(4H, H)``. Returns ``(h_t, c_t)``.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    W_x, W_h, b = as_tensor(W_x), as_tensor(W_h), as_tensor(b)
    hid = W_h.shape[1]
    if W_x.shape[0] != 4 * hid or W_h.shape[0] != 4 * hid or x.shape[-1] != W_x.shape[1]:
        raise ValueError("lstm_cell: parameter shapes do not match")
    z = x.data @ W_x.data.T + h_prev.data @ W_h.data.T + b.data
    i = expit(z[..., :hid])
    f = expit(z[..., hid : 2 * hid])
    gc = np.tanh(z[..., 2 * hid : 3 * hid])
    o = expit(z[..., 3 * hid :])
    c = f * c_prev.data + i * gc
    tc = np.tanh(c)
    h = o * tc
    joint_data = np.concatenate([h, c], axis=-1)

    def backward(gj):
        gh, gcn = gj[..., :hid], gj[..., hid:]
        dc = gcn + gh * o * (1 - tc * tc)
        dz = np.concatenate(
            [dc * gc * i * (1 - i), dc * c_prev.data * f * (1 - f), dc * i * (1 - gc * gc), gh * tc * o * (1 - o)],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * hid)
        return (
            dz @ W_x.data if x.requires_grad else None,
            dz @ W_h.data if h_prev.requires_grad else None,
            dc * f if c_prev.requires_grad else None,
            dz2.T @ x.data.reshape(-1, x.shape[-1]),
            dz2.T @ h_prev.data.reshape(-1, hid),
            dz2.sum(axis=0),
        )

    joint = result(joint_data, (x, h_prev, c_prev, W_x, W_h, b), backward)
    return slice_last(joint, 0, hid), slice_last(joint, hid, 2 * hid)


def mse_loss(pred, target):
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return result(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred,),
                  lambda g: (g * (2.0 / n) * diff,))


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype))
