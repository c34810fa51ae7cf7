# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im lowering used by the convolution ops.

Column layout is ``[C * kh * kw, N * out_h * out_w]`` with the row index
ordered (channel, kernel row, kernel col) and the column index ordered
(sample, out row, out col). Must stay bit-identical to ``_kernels_py``.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline void _col_bounds(Py_ssize_t j, int stride, int pad, Py_ssize_t width,
                             Py_ssize_t out_w, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # valid ow satisfy 0 <= ow * stride - pad + j < width
    cdef Py_ssize_t a = pad - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    cdef Py_ssize_t b = width - 1 + pad - j
    hi[0] = 0 if b < 0 else b // stride + 1
    if hi[0] > out_w:
        hi[0] = out_w
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols, int kh, int kw,
            int stride, int pad, int out_h, int out_w):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t c, i, j, n, oh, ow, row, base, lo, hi
    cdef Py_ssize_t ih, iw0
    cdef Py_ssize_t plane = out_h * out_w
    cdef real* dst
    cdef real* src
    with nogil:
        for c in range(channels):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    _col_bounds(j, stride, pad, width, out_w, &lo, &hi)
                    iw0 = j - pad
                    for n in range(n_batch):
                        base = n * plane
                        for oh in range(out_h):
                            dst = &cols[row, base + oh * out_w]
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= height:
                                for ow in range(out_w):
                                    dst[ow] = 0
                                continue
                            src = &x[n, c, ih, 0]
                            for ow in range(lo):
                                dst[ow] = 0
                            if stride == 1:
                                for ow in range(lo, hi):
                                    dst[ow] = src[ow + iw0]
                            else:
                                for ow in range(lo, hi):
                                    dst[ow] = src[ow * stride + iw0]
                            for ow in range(hi, out_w):
                                dst[ow] = 0


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] dx, int kh, int kw,
            int stride, int pad, int out_h, int out_w):
    cdef Py_ssize_t n_batch = dx.shape[0], channels = dx.shape[1]
    cdef Py_ssize_t height = dx.shape[2], width = dx.shape[3]
    cdef Py_ssize_t c, i, j, n, oh, ow, row, base, lo, hi
    cdef Py_ssize_t ih, iw0
    cdef Py_ssize_t plane = out_h * out_w
    cdef real* src
    cdef real* dst
    with nogil:
        for c in range(channels):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    _col_bounds(j, stride, pad, width, out_w, &lo, &hi)
                    iw0 = j - pad
                    for n in range(n_batch):
                        base = n * plane
                        for oh in range(out_h):
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= height:
                                continue
                            src = &cols[row, base + oh * out_w]
                            dst = &dx[n, c, ih, 0]
                            if stride == 1:
                                for ow in range(lo, hi):
                                    dst[ow + iw0] += src[ow]
                            else:
                                for ow in range(lo, hi):
                                    dst[ow * stride + iw0] += src[ow]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c * kh * kw, n * out_h * out_w), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad, out_h, out_w)
    return cols


def col2im(cols, x_shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = x_shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, dx, kh, kw, stride, pad, out_h, out_w)
    return dx


# ---------------------------------------------------------------------------
# batch normalization; x is viewed as [N, C, L] with L the flattened spatial extent


def _bn_stats(real[:, :, ::1] x, double[::1] mean, double[::1] var):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1], length = x.shape[2]
    cdef Py_ssize_t n, c, l
    cdef double acc, d, count = n_batch * length
    with nogil:
        for c in range(channels):
            acc = 0
            for n in range(n_batch):
                for l in range(length):
                    acc = acc + x[n, c, l]
            mean[c] = acc / count
            acc = 0
            for n in range(n_batch):
                for l in range(length):
                    d = x[n, c, l] - mean[c]
                    acc = acc + d * d
            var[c] = acc / count


def _affine(real[:, :, ::1] x, real[::1] scale, real[::1] shift, real[:, :, ::1] out):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1], length = x.shape[2]
    cdef Py_ssize_t n, c, l
    cdef real a, b
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                a = scale[c]
                b = shift[c]
                for l in range(length):
                    out[n, c, l] = x[n, c, l] * a + b


def _bn_backward(real[:, :, ::1] g, real[:, :, ::1] x, real[::1] mean, real[::1] inv_std,
                 real[::1] gamma, bint training, real[:, :, ::1] dx, double[::1] dgamma, double[::1] dbeta):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1], length = x.shape[2]
    cdef Py_ssize_t n, c, l
    cdef double sg, sgx, mu, inv, count = n_batch * length
    cdef real k, k0, k1
    with nogil:
        for c in range(channels):
            sg = 0
            sgx = 0
            mu = mean[c]
            for n in range(n_batch):
                for l in range(length):
                    sg = sg + g[n, c, l]
                    sgx = sgx + g[n, c, l] * (x[n, c, l] - mu)
            inv = inv_std[c]
            dbeta[c] = sg
            dgamma[c] = sgx * inv
            k = gamma[c] * inv
            if training:
                # dx = k * (g - sg/M - xhat * sum(g*xhat)/M)
                k0 = <real>(sg / count)
                k1 = <real>(sgx * inv * inv / count)
                for n in range(n_batch):
                    for l in range(length):
                        dx[n, c, l] = k * (g[n, c, l] - k0 - (x[n, c, l] - <real>mu) * k1)
            else:
                for n in range(n_batch):
                    for l in range(length):
                        dx[n, c, l] = k * g[n, c, l]


def bn_stats(x3):
    c = x3.shape[1]
    mean = np.empty(c)
    var = np.empty(c)
    _bn_stats(np.ascontiguousarray(x3), mean, var)
    return mean, var


def affine(x3, scale, shift):
    out = np.empty_like(x3)
    _affine(np.ascontiguousarray(x3), np.ascontiguousarray(scale, dtype=x3.dtype),
            np.ascontiguousarray(shift, dtype=x3.dtype), out)
    return out


def bn_backward(g3, x3, mean, inv_std, gamma, training):
    dt = x3.dtype
    c = x3.shape[1]
    dx = np.empty_like(x3)
    dgamma = np.empty(c)
    dbeta = np.empty(c)
    _bn_backward(np.ascontiguousarray(g3, dtype=dt), np.ascontiguousarray(x3),
                 np.ascontiguousarray(mean, dtype=dt), np.ascontiguousarray(inv_std, dtype=dt),
                 np.ascontiguousarray(gamma, dtype=dt), training, dx, dgamma, dbeta)
    return dx, dgamma.astype(dt), dbeta.astype(dt)
