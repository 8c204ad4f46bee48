"""Differentiable operators used by the restoration network.

All spatial operators take N,C,H,W tensors. Each op computes its forward
result with numpy and records a backward closure when any input requires grad.
"""

from __future__ import annotations

import builtins
import math
import threading
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor, as_tensor, ensure_4d, make_result

_mac_state = threading.local()


@contextmanager
def count_macs():
    """Count multiply-accumulates of conv2d and matmul calls inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    box = [0]
    prev = getattr(_mac_state, "box", None)
    _mac_state.box = box
    try:
        yield box
    finally:
        _mac_state.box = prev


def _add_macs(n: int) -> None:
    box = getattr(_mac_state, "box", None)
    if box is not None:
        box[0] += int(n)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.dtype != b.dtype:
        dt = np.result_type(a.dtype, b.dtype)
        if a.dtype != dt and not a.requires_grad:
            a = Tensor(a.data.astype(dt))
        if b.dtype != dt and not b.requires_grad:
            b = Tensor(b.data.astype(dt))
    return a, b


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, "add", (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, "sub", (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, "div", (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * x.dtype.type(c), "scale", (x,), lambda g: (g * c,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return make_result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th ** 2) * dinner),)

    return make_result(out, "gelu", (x,), backward)


# -- shape -------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                       lambda g: (g.transpose(inv),))


def split(x: Tensor, sections: int | Sequence[int], axis: int = 1) -> list[Tensor]:
    """Split along ``axis`` into equal parts (int) or parts of the given sizes."""
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise DimensionError(f"cannot split extent {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if builtins.sum(sizes) != n:
            raise DimensionError(f"split sizes {sizes} do not sum to {n}")
    outs = []
    start = 0
    for size in sizes:
        outs.append(_slice_axis(x, axis, start, start + size))
        start += size
    return outs


def _slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[idx]), "slice", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                       tensors, backward)


# -- reductions --------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    return mean(abs(sub(a, b)))


def global_avg_pool(x: Tensor) -> Tensor:
    ensure_4d(x, "global_avg_pool")
    return mean(x, axis=(2, 3), keepdims=True)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    try:
        lead = np.broadcast_shapes(lead_a, lead_b)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _add_macs(int(np.prod(lead, dtype=np.int64)) * m * k * n)

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "matmul", (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise UsageError(f"softmax axis {axis} out of range for {x.ndim}-D input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (x,), backward)


# -- convolution ---------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation, N,C,H,W input and Cout,Cin/groups,kh,kw weights."""
    ensure_4d(x, "conv2d")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D, got {w.shape}")
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cpg != cin // groups:
        raise DimensionError(f"weight expects {cpg * groups} input channels, got {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias shape {b.shape} != ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")
    if x.dtype != w.dtype:
        x = Tensor(x.data.astype(w.dtype)) if not x.requires_grad else x
    _add_macs(n * cout * cpg * kh * kw * ho * wo)

    xd, wdat = x.data, w.data
    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        out, back = _conv_pointwise(xd, wdat)
    elif groups == cin and cout == cin and stride == 1:
        out, back = _conv_depthwise(xd, wdat, padding)
    else:
        out, back = _conv_general(xd, wdat, stride, padding, groups)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gx, gw = back(g, x.requires_grad, w.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return make_result(out, "conv2d", parents, lambda g: backward(g)[:2])
    return make_result(out, "conv2d", parents, backward)


def _conv_pointwise(xd, wd):
    n, c, h, w_ = xd.shape
    o = wd.shape[0]
    wm = wd.reshape(o, c)
    xm = xd.reshape(n, c, h * w_)
    out = np.matmul(wm, xm).reshape(n, o, h, w_)

    def back(g, need_x, need_w):
        gm = g.reshape(n, o, h * w_)
        gx = np.matmul(wm.T, gm).reshape(xd.shape) if need_x else None
        gw = np.einsum("nop,ncp->oc", gm, xm).reshape(wd.shape) if need_w else None
        return gx, gw

    return out, back


def _conv_depthwise(xd, wd, padding):
    n, c, h, w_ = xd.shape
    kh, kw = wd.shape[2:]
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wd[:, 0, i, j].reshape(1, c, 1, 1) * xp[:, :, i:i + ho, j:j + wo]

    def back(g, need_x, need_w):
        gx = gw = None
        if need_x:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += g * wd[:, 0, i, j].reshape(1, c, 1, 1)
            gx = gxp[:, :, padding:padding + h, padding:padding + w_] if padding else gxp
        if need_w:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + ho, j:j + wo])
        return gx, gw

    return out, back


def _conv_general(xd, wd, stride, padding, groups):
    n, c, h, w_ = xd.shape
    o, cpg, kh, kw = wd.shape
    opg = o // groups
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.empty((n, o, ho, wo), dtype=xd.dtype)
    for gi in range(groups):
        wg = wd[gi * opg:(gi + 1) * opg]
        wing = win[:, gi * cpg:(gi + 1) * cpg]
        # (n, cpg, ho, wo, kh, kw) x (opg, cpg, kh, kw) -> (n, ho, wo, opg)
        res = np.tensordot(wing, wg, axes=([1, 4, 5], [1, 2, 3]))
        out[:, gi * opg:(gi + 1) * opg] = res.transpose(0, 3, 1, 2)

    def back(g, need_x, need_w):
        gx = gw = None
        if need_w:
            gw = np.empty_like(wd)
            for gi in range(groups):
                gg = g[:, gi * opg:(gi + 1) * opg]
                wing = win[:, gi * cpg:(gi + 1) * cpg]
                gw[gi * opg:(gi + 1) * opg] = np.tensordot(gg, wing, axes=([0, 2, 3], [0, 2, 3]))
        if need_x:
            gxp = np.zeros_like(xp)
            for gi in range(groups):
                gg = g[:, gi * opg:(gi + 1) * opg]
                wg = wd[gi * opg:(gi + 1) * opg]
                for i in range(kh):
                    for j in range(kw):
                        contrib = np.einsum("nopq,oc->ncpq", gg, wg[:, :, i, j])
                        gxp[:, gi * cpg:(gi + 1) * cpg,
                            i:i + stride * (ho - 1) + 1:stride,
                            j:j + stride * (wo - 1) + 1:stride] += contrib
            gx = gxp[:, :, padding:padding + h, padding:padding + w_] if padding else gxp
        return gx, gw

    return out, back


# -- normalization ---------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis at every pixel, then apply a per-channel affine."""
    ensure_4d(x, "layer_norm")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    c = x.shape[1]
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        if gamma.requires_grad:
            ggam = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbet = g.sum(axis=(0, 2, 3))
        return gx, ggam, gbet

    return make_result(out, "layer_norm", (x, gamma, beta), backward)


# -- spatial rearrangement ---------------------------------------------------------

def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """N,C,H,W -> N,C*r*r,H/r,W/r; output channel c*r*r + i*r + j holds x[c, i::r, j::r]."""
    ensure_4d(x, "pixel_unshuffle")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise DimensionError(f"pixel_unshuffle: {h}x{w} not divisible by {r}")
    out = x.data.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    out = np.ascontiguousarray(out).reshape(n, c * r * r, h // r, w // r)

    def backward(g):
        return (_pixel_shuffle_np(g, r),)

    return make_result(out, "pixel_unshuffle", (x,), backward)


def _pixel_shuffle_np(d: np.ndarray, r: int) -> np.ndarray:
    n, cr, h, w = d.shape
    c = cr // (r * r)
    out = d.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out).reshape(n, c, h * r, w * r)


def _pixel_unshuffle_np(d: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = d.shape
    out = d.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    ensure_4d(x, "pixel_shuffle")
    if x.shape[1] % (r * r):
        raise DimensionError(f"pixel_shuffle: {x.shape[1]} channels not divisible by {r * r}")
    return make_result(_pixel_shuffle_np(x.data, r), "pixel_shuffle", (x,),
                       lambda g: (_pixel_unshuffle_np(g, r),))


def upsample_nearest(x: Tensor, r: int) -> Tensor:
    ensure_4d(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, r, axis=2), r, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, r, w, r).sum(axis=(3, 5)),)

    return make_result(out, "upsample_nearest", (x,), backward)


def box_downsample(x: Tensor, r: int) -> Tensor:
    """Mean over non-overlapping r x r blocks."""
    ensure_4d(x, "box_downsample")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise DimensionError(f"box_downsample: {h}x{w} not divisible by {r}")
    out = x.data.reshape(n, c, h // r, r, w // r, r).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, r, axis=2), r, axis=3)
        return (up / (r * r),)

    return make_result(out, "box_downsample", (x,), backward)


def unfold(x: Tensor, k: int, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """N,C,H,W -> N, C*k*k, L with zero-padded k x k patches as columns.

    Row ``c*k*k + i*k + j`` of column ``p`` is ``x[c, y+i-pad, x+j-pad]`` for the
    p-th output location ``(y, x)`` in row-major order.
    """
    ensure_4d(x, "unfold")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"unfold kernel must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)

    def backward(g):
        gw = g.reshape(n, c, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += gw[:, :, i, j]
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result(out, "unfold", (x,), backward)


# -- spectral ------------------------------------------------------------------

def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def fft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalized 2-D DFT over the last two axes of a real tensor.

    Returns the real and imaginary parts as separate tensors.
    """
    if x.ndim < 2:
        raise DimensionError("fft2 needs at least 2-D input")
    h, w = x.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ConfigError(f"fft2 extents must be powers of two, got {h}x{w}")
    spec = np.fft.fft2(x.data.astype(np.float64), axes=(-2, -1))
    re = spec.real.astype(x.dtype)
    im = spec.imag.astype(x.dtype)
    dt = x.dtype

    # the DFT matrix is symmetric, so the adjoint of x -> Re(Fx) is g -> Re(Fg)
    def back_re(g):
        return (np.fft.fft2(g, axes=(-2, -1)).real.astype(dt),)

    def back_im(g):
        return (np.fft.fft2(g, axes=(-2, -1)).imag.astype(dt),)

    return (make_result(re, "fft2_real", (x,), back_re),
            make_result(im, "fft2_imag", (x,), back_im))
