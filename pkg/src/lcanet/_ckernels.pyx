# cython: language_level=3
"""Compiled inner loops for convolution and pooling.

Every routine here mirrors a function in ``lcanet._npkernels`` and must
produce bit-identical float32 results, including accumulation order in the
scatter (``col2im``) path.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memset

cnp.import_array()


def im2col(const float[:, :, :, ::1] x, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t n_b = x.shape[0], n_c = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t l = oh * ow
    out_arr = np.empty((n_c * kh * kw, n_b * l), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t c, ki, kj, row, b, i, j, ii, jj, col
    with nogil:
        for c in range(n_c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for b in range(n_b):
                        for i in range(oh):
                            ii = i * stride - padding + ki
                            col = b * l + i * ow
                            if ii < 0 or ii >= h:
                                for j in range(ow):
                                    out[row, col + j] = 0.0
                                continue
                            for j in range(ow):
                                jj = j * stride - padding + kj
                                if jj < 0 or jj >= w:
                                    out[row, col + j] = 0.0
                                else:
                                    out[row, col + j] = x[b, c, ii, jj]
    return out_arr


def col2im(const float[:, ::1] cols, int n_b, int n_c, int h, int w,
           int kh, int kw, int stride, int padding):
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t l = oh * ow
    out_arr = np.zeros((n_b, n_c, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, ki, kj, row, b, i, j, ii, jj, col
    with nogil:
        for c in range(n_c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for b in range(n_b):
                        for i in range(oh):
                            ii = i * stride - padding + ki
                            if ii < 0 or ii >= h:
                                continue
                            col = b * l + i * ow
                            for j in range(ow):
                                jj = j * stride - padding + kj
                                if jj >= 0 and jj < w:
                                    out[b, c, ii, jj] = out[b, c, ii, jj] + cols[row, col + j]
    return out_arr


def maxpool2_forward(const float[:, :, :, ::1] x):
    cdef Py_ssize_t n_b = x.shape[0], n_c = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] // 2, ow = x.shape[3] // 2
    out_arr = np.empty((n_b, n_c, oh, ow), dtype=np.float32)
    arg_arr = np.empty((n_b, n_c, oh, ow), dtype=np.int8)
    cdef float[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, i, j
    cdef float best, v
    cdef cnp.int8_t k
    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                for i in range(oh):
                    for j in range(ow):
                        # window order (0,0),(0,1),(1,0),(1,1); first max wins
                        best = x[b, c, 2 * i, 2 * j]
                        k = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, c, i, j] = best
                        arg[b, c, i, j] = k
    return out_arr, arg_arr


def maxpool2_backward(const float[:, :, :, ::1] grad, const cnp.int8_t[:, :, :, ::1] arg):
    cdef Py_ssize_t n_b = grad.shape[0], n_c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    out_arr = np.zeros((n_b, n_c, 2 * oh, 2 * ow), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j
    cdef cnp.int8_t k
    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                for i in range(oh):
                    for j in range(ow):
                        k = arg[b, c, i, j]
                        out[b, c, 2 * i + (k >> 1), 2 * j + (k & 1)] = grad[b, c, i, j]
    return out_arr
