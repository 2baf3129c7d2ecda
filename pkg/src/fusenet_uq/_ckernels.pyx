# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Drop-in replacements for the functions in ``_pykernels``; results are
bit-identical because every kernel only copies, compares or sums values in
the same order as the numpy version.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] cols, int kh, int kw):
    cdef Py_ssize_t b, c, i, j, y, xx, row, sy, sx
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int ph = kh // 2, pw = kw // 2
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(H):
                            sy = y + i - ph
                            if sy < 0 or sy >= H:
                                for xx in range(W):
                                    cols[b, row, y * W + xx] = 0
                                continue
                            for xx in range(W):
                                sx = xx + j - pw
                                if sx < 0 or sx >= W:
                                    cols[b, row, y * W + xx] = 0
                                else:
                                    cols[b, row, y * W + xx] = x[b, c, sy, sx]


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] dx, int kh, int kw):
    # accumulation order (i, j outer; pixels inner) matches the numpy fallback
    cdef Py_ssize_t b, c, i, j, y, xx, row, sy, sx
    cdef Py_ssize_t B = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef int ph = kh // 2, pw = kw // 2
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(H):
                            sy = y + i - ph
                            if sy < 0 or sy >= H:
                                continue
                            for xx in range(W):
                                sx = xx + j - pw
                                if sx >= 0 and sx < W:
                                    dx[b, c, sy, sx] += cols[b, row, y * W + xx]


def _maxpool_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] out, Py_ssize_t[:, :, :, ::1] idx, int k):
    cdef Py_ssize_t b, c, oy, ox, u, v, best
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef real m, val
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        m = x[b, c, oy * k, ox * k]
                        best = 0
                        for u in range(k):
                            for v in range(k):
                                val = x[b, c, oy * k + u, ox * k + v]
                                if val > m:
                                    m = val
                                    best = u * k + v
                        out[b, c, oy, ox] = m
                        idx[b, c, oy, ox] = best


def _maxpool_backward(real[:, :, :, ::1] dout, Py_ssize_t[:, :, :, ::1] idx, real[:, :, :, ::1] dx, int k):
    cdef Py_ssize_t b, c, oy, ox, p
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], Ho = dout.shape[2], Wo = dout.shape[3]
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        p = idx[b, c, oy, ox]
                        dx[b, c, oy * k + p // k, ox * k + p % k] = dout[b, c, oy, ox]


def im2col(x, int kh, int kw):
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    cols = np.empty((b, c * kh * kw, h * w), dtype=x.dtype)
    _im2col(x, cols, kh, kw)
    return cols


def col2im(cols, shape, int kh, int kw):
    cols = np.ascontiguousarray(cols)
    dx = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, dx, kh, kw)
    return dx


def maxpool_forward(x, int k):
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    out = np.empty((b, c, h // k, w // k), dtype=x.dtype)
    idx = np.empty((b, c, h // k, w // k), dtype=np.intp)
    _maxpool_forward(x, out, idx, k)
    return out, idx


def maxpool_backward(dout, idx, int k):
    dout = np.ascontiguousarray(dout)
    b, c, ho, wo = dout.shape
    dx = np.zeros((b, c, ho * k, wo * k), dtype=dout.dtype)
    _maxpool_backward(dout, np.ascontiguousarray(idx, dtype=np.intp), dx, k)
    return dx
