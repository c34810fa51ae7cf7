"""Pure-numpy im2col / col2im; same layout and summation order as ``_kernels``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # windows: [N, C, H', W', kh, kw]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # -> [C, kh, kw, N, out_h, out_w]
    cols = win.transpose(1, 4, 5, 0, 2, 3)
    return np.ascontiguousarray(cols).reshape(c * kh * kw, n * out_h * out_w)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    blocks = cols.reshape(c, kh, kw, n, out_h, out_w).transpose(3, 0, 1, 2, 4, 5)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += blocks[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


def bn_stats(x3):
    """Per-channel mean and biased variance of ``[N, C, L]``, accumulated in float64."""
    mean = x3.mean(axis=(0, 2), dtype=np.float64)
    d = x3 - mean[None, :, None].astype(x3.dtype)
    var = np.einsum("ncl,ncl->c", d, d, dtype=np.float64) / (x3.shape[0] * x3.shape[2])
    return mean, var


def affine(x3, scale, shift):
    dt = x3.dtype
    out = x3 * scale.astype(dt)[None, :, None]
    out += shift.astype(dt)[None, :, None]
    return out


def bn_backward(g3, x3, mean, inv_std, gamma, training):
    dt = x3.dtype
    count = x3.shape[0] * x3.shape[2]
    centered = x3 - mean.astype(dt)[None, :, None]
    sg = g3.sum(axis=(0, 2), dtype=np.float64)
    sgx = np.einsum("ncl,ncl->c", g3, centered, dtype=np.float64)
    inv = inv_std.astype(np.float64)
    k = (gamma * inv_std).astype(dt)[None, :, None]
    if training:
        k0 = (sg / count).astype(dt)[None, :, None]
        k1 = (sgx * inv * inv / count).astype(dt)[None, :, None]
        dx = k * (g3 - k0 - centered * k1)
    else:
        dx = k * g3
    return dx, (sgx * inv).astype(dt), sg.astype(dt)
