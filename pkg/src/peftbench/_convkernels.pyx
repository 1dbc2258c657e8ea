# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for float64 NCHW tensors.

Both routines are pure data movement (gather / ordered scatter-add), so
their results are bitwise identical to the numpy fallback in kernels.py:
col2im accumulates per output element in ascending kernel-position order,
matching the fallback's slice-add loop.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(cnp.ndarray[cnp.float64_t, ndim=4] x, int kh, int kw,
           int sh, int sw, int ph, int pw):
    cdef Py_ssize_t b_n = x.shape[0], c_n = x.shape[1]
    cdef Py_ssize_t h_n = x.shape[2], w_n = x.shape[3]
    cdef Py_ssize_t ho = (h_n + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w_n + 2 * pw - kw) // sw + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=3] cols = np.zeros(
        (b_n, c_n * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, :, :] xv = x
    cdef double[:, :, :] cv = cols
    cdef Py_ssize_t b, c, i, j, oh, ow, row, h, w
    with nogil:
        for b in range(b_n):
            for c in range(c_n):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oh in range(ho):
                            h = oh * sh + i - ph
                            if h < 0 or h >= h_n:
                                continue
                            for ow in range(wo):
                                w = ow * sw + j - pw
                                if w < 0 or w >= w_n:
                                    continue
                                cv[b, row, oh * wo + ow] = xv[b, c, h, w]
    return cols


def col2im(cnp.ndarray[cnp.float64_t, ndim=3] cols, int c_n, int h_n, int w_n,
           int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t b_n = cols.shape[0]
    cdef Py_ssize_t ho = (h_n + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w_n + 2 * pw - kw) // sw + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=4] x = np.zeros(
        (b_n, c_n, h_n, w_n), dtype=np.float64)
    cdef double[:, :, :] cv = cols
    cdef double[:, :, :, :] xv = x
    cdef Py_ssize_t b, c, i, j, oh, ow, row, h, w
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(b_n):
                    for c in range(c_n):
                        row = (c * kh + i) * kw + j
                        for oh in range(ho):
                            h = oh * sh + i - ph
                            if h < 0 or h >= h_n:
                                continue
                            for ow in range(wo):
                                w = ow * sw + j - pw
                                if w < 0 or w >= w_n:
                                    continue
                                xv[b, c, h, w] += cv[b, row, oh * wo + ow]
    return x
