"""Layer primitives with hand-written adjoints.

Convolutions use "same" zero padding and cross-correlation order, like
every mainstream framework.  Pooling ties resolve to the first element in
row-major scan order of the pooling window.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, custom_vjp


def _require_shape(x: np.ndarray, ndim: int, name: str, op: str) -> None:
    if x.ndim != ndim:
        raise ValueError(f"{op}: {name} must have {ndim} axes, got shape {x.shape}")


def _im2col(a: np.ndarray, k: int) -> np.ndarray:
    """Columns ``[b, c*k*k, h*w]`` of a zero-padded ``a[b, c, h, w]``."""
    b, c, h, w = a.shape
    if k == 1:
        return a.reshape(b, c, h * w)
    p = k // 2
    ap = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((b, c, k, k, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = ap[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * k * k, h * w)


def conv2d(x, kernel, bias=None) -> Tensor:
    """2-D cross-correlation of ``x[b, c_in, h, w]`` with ``kernel[c_out, c_in, k, k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, wd = x.data, kernel.data
    _require_shape(xd, 4, "input", "conv2d")
    _require_shape(wd, 4, "kernel", "conv2d")
    if wd.shape[1] != xd.shape[1]:
        raise ValueError(f"conv2d: channel axis mismatch, input has {xd.shape[1]} "
                         f"channels but kernel expects {wd.shape[1]}")
    k = wd.shape[2]
    if wd.shape[3] != k or k % 2 == 0:
        raise ValueError(f"conv2d: kernel spatial axes must be square and odd, got {wd.shape[2:]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"conv2d: bias axis must have {wd.shape[0]} entries, got {bias.shape}")
    b, c, h, w = xd.shape
    cout = wd.shape[0]
    cols = _im2col(xd, k)
    wmat = wd.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(b, cout, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        gx = gw = gb = None
        g3 = g.reshape(b, cout, h * w)
        if x.requires_grad:
            wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
            gx = np.matmul(wflip, _im2col(g, k)).reshape(b, c, h, w)
        if kernel.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return custom_vjp("conv2d", out, parents, vjp)


def conv1d(x, kernel, bias=None) -> Tensor:
    """1-D cross-correlation of ``x[b, c_in, n]`` with ``kernel[c_out, c_in, k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, wd = x.data, kernel.data
    _require_shape(xd, 3, "input", "conv1d")
    _require_shape(wd, 3, "kernel", "conv1d")
    if wd.shape[1] != xd.shape[1]:
        raise ValueError(f"conv1d: channel axis mismatch, input has {xd.shape[1]} "
                         f"channels but kernel expects {wd.shape[1]}")
    k = wd.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv1d: kernel length must be odd, got {k}")
    p = k // 2

    def windows(a):
        return sliding_window_view(np.pad(a, ((0, 0), (0, 0), (p, p))), k, axis=2)

    out = np.tensordot(windows(xd), wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(windows(g), wd[:, :, ::-1], axes=([1, 3], [0, 2])).transpose(0, 2, 1)
        if kernel.requires_grad:
            gw = np.tensordot(g, windows(xd), axes=([0, 2], [0, 2]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return custom_vjp("conv1d", np.ascontiguousarray(out), parents, vjp)


def maxpool2(x) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes of ``x[b, c, h, w]``."""
    x = as_tensor(x)
    xd = x.data
    _require_shape(xd, 4, "input", "maxpool2")
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    blocks = xd.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return custom_vjp("maxpool2", out, (x,), vjp)


def maxpool1d(x) -> Tensor:
    """Non-overlapping pooling by 2 over the last axis of ``x[b, c, n]``."""
    x = as_tensor(x)
    xd = x.data
    _require_shape(xd, 3, "input", "maxpool1d")
    b, c, n = xd.shape
    if n % 2:
        raise ValueError(f"maxpool1d: length must be even, got {n}")
    pairs = xd.reshape(b, c, n // 2, 2)
    idx = np.argmax(pairs, axis=-1)[..., None]
    out = np.take_along_axis(pairs, idx, axis=-1)[..., 0]

    def vjp(g):
        gp = np.zeros((b, c, n // 2, 2))
        np.put_along_axis(gp, idx, g[..., None], axis=-1)
        return (gp.reshape(b, c, n),)

    return custom_vjp("maxpool1d", out, (x,), vjp)


@lru_cache(maxsize=64)
def bilinear_matrix(n: int) -> np.ndarray:
    """Weights mapping ``n`` samples to ``2n`` with half-pixel (align-corners-false) centers."""
    a = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        a[o, i0] += 1.0 - lam
        a[o, i1] += lam
    a.setflags(write=False)
    return a


def upsample_bilinear2(x) -> Tensor:
    """Double both spatial extents of ``x[b, c, h, w]`` by bilinear interpolation."""
    x = as_tensor(x)
    xd = x.data
    _require_shape(xd, 4, "input", "upsample_bilinear2")
    ah, aw = bilinear_matrix(xd.shape[2]), bilinear_matrix(xd.shape[3])
    out = ah @ xd @ aw.T
    return custom_vjp("upsample_bilinear2", out, (x,), lambda g: (ah.T @ g @ aw,))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all axes except axis 1.

    In training mode the batch statistics are used and the running buffers are
    updated in place as ``r <- momentum * r + (1 - momentum) * batch`` (the
    variance buffer receives the unbiased estimate).  In eval mode the buffers
    are used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: channel axis has {c} entries, "
                         f"affine parameters have {gamma.shape} and {beta.shape}")
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    n = xd.size // c
    if training:
        if n < 2:
            raise ValueError("batch_norm: training mode needs more than one value per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * n / (n - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def vjp(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = inv_std.reshape(bshape) * (dxhat - s1 / n - xhat * s2 / n)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return custom_vjp("batch_norm", out, (x, gamma, beta), vjp)
