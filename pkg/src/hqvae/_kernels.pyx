# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels for strided 2-D convolution."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Return patches of shape (N, Ho, Wo, C*kh*kw) from an NCHW array."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, ho, wo, c * kh * kw), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, oi, oj, col, yy, xx
    with nogil:
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    col = 0
                    for ci in range(c):
                        for i in range(kh):
                            yy = oi * stride - pad + i
                            for j in range(kw):
                                xx = oj * stride - pad + j
                                if 0 <= yy < h and 0 <= xx < w:
                                    out[b, oi, oj, col] = x[b, ci, yy, xx]
                                col = col + 1
    return out_arr


def col2im(real[:, :, :, ::1] cols, int c, int h, int w, int kh, int kw, int stride, int pad):
    """Scatter-add patches of shape (N, Ho, Wo, C*kh*kw) back to an NCHW array."""
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, oi, oj, col, yy, xx
    with nogil:
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    col = 0
                    for ci in range(c):
                        for i in range(kh):
                            yy = oi * stride - pad + i
                            for j in range(kw):
                                xx = oj * stride - pad + j
                                if 0 <= yy < h and 0 <= xx < w:
                                    out[b, ci, yy, xx] += cols[b, oi, oj, col]
                                col = col + 1
    return out_arr


DEF GELU_C = 0.7978845608028654
DEF GELU_A = 0.044715


def gelu_forward(real[::1] x):
    """Tanh-approximate GELU; returns (out, tanh_inner) flat arrays."""
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    t_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef real[::1] t = t_arr
    cdef real v
    # scalar libm tanh is slower than numpy's vectorized one, so only fuse the polynomials
    with nogil:
        for i in range(n):
            v = x[i]
            t[i] = GELU_C * (v + GELU_A * v * v * v)
    np.tanh(t_arr, out=t_arr)
    with nogil:
        for i in range(n):
            out[i] = 0.5 * x[i] * (1 + t[i])
    return out_arr, t_arr


def gelu_backward(real[::1] x, real[::1] t, real[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef real v, th
    with nogil:
        for i in range(n):
            v = x[i]
            th = t[i]
            out[i] = g[i] * (0.5 * (1 + th) + 0.5 * v * (1 - th * th) * GELU_C * (1 + 3 * GELU_A * v * v))
    return out_arr
