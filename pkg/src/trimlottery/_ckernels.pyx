# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels for conv1d and maxpool1d.

Same signatures and results as ``_kernels_py``; the matrix products stay in
numpy (BLAS), only the memory-bound loops live here.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t dilation, Py_ssize_t l_out):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t bi, ci, j, t
    cdef real* src
    cdef real* dst
    dtype = np.float32 if real is float else np.float64
    out = np.empty((b, c * k, l_out), dtype=dtype)
    if out.size == 0:
        return out
    cdef real[:, :, ::1] o = out
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for j in range(k):
                    src = &xp[bi, ci, j * dilation]
                    dst = &o[bi, ci * k + j, 0]
                    if stride == 1:
                        for t in range(l_out):
                            dst[t] = src[t]
                    else:
                        for t in range(l_out):
                            dst[t] = src[t * stride]
    return out


def col2im(real[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t lp, Py_ssize_t k,
           Py_ssize_t stride, Py_ssize_t dilation):
    cdef Py_ssize_t b = cols.shape[0], l_out = cols.shape[2]
    cdef Py_ssize_t bi, ci, j, t
    cdef real* src
    cdef real* dst
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b, c, lp), dtype=dtype)
    if cols.shape[0] * cols.shape[1] * l_out == 0:
        return out
    cdef real[:, :, ::1] o = out
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for j in range(k):
                    src = &cols[bi, ci * k + j, 0]
                    dst = &o[bi, ci, j * dilation]
                    if stride == 1:
                        for t in range(l_out):
                            dst[t] += src[t]
                    else:
                        for t in range(l_out):
                            dst[t * stride] += src[t]
    return out


def maxpool_forward(real[:, :, ::1] x, Py_ssize_t window):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], length = x.shape[2]
    cdef Py_ssize_t l_out = length // window
    cdef Py_ssize_t bi, ci, t, w, best
    cdef real m
    dtype = np.float32 if real is float else np.float64
    out = np.empty((b, c, l_out), dtype=dtype)
    idx = np.empty((b, c, l_out), dtype=np.int64)
    cdef real[:, :, ::1] o = out
    cdef cnp.int64_t[:, :, ::1] ix = idx
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for t in range(l_out):
                    best = 0
                    m = x[bi, ci, t * window]
                    for w in range(1, window):
                        if x[bi, ci, t * window + w] > m:
                            m = x[bi, ci, t * window + w]
                            best = w
                    o[bi, ci, t] = m
                    ix[bi, ci, t] = best
    return out, idx


def maxpool_backward(real[:, :, ::1] gout, cnp.int64_t[:, :, ::1] idx,
                     Py_ssize_t window, Py_ssize_t length):
    cdef Py_ssize_t b = gout.shape[0], c = gout.shape[1], l_out = gout.shape[2]
    cdef Py_ssize_t bi, ci, t
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b, c, length), dtype=dtype)
    cdef real[:, :, ::1] o = out
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for t in range(l_out):
                    o[bi, ci, t * window + idx[bi, ci, t]] = gout[bi, ci, t]
    return out
