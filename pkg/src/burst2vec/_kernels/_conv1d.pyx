# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv1d kernels: C window packing around BLAS gemm.

The contraction runs in the same BLAS numpy links against; what is compiled
here is the im2col packing, which numpy otherwise routes through generic
strided-copy machinery, and the column-to-input scatter-add, which the
fallback runs as a Python-level loop over output steps. Single-threaded
packing keeps results reproducible run to run. Float32 and float64
instantiations come from a fused type.
"""

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused floating:
    float
    double


cdef inline void _gemm_rm(floating* amat, floating* bmat, floating* cmat,
                          int m, int n, int k, floating beta) noexcept nogil:
    """Row-major C (m, n) = A (m, k) @ B (k, n) + beta * C.

    Fortran gemm sees each row-major buffer as its transpose, so computing
    C' = B' A' with swapped operands yields the row-major product."""
    cdef char* tn = b'N'
    cdef floating alpha = <floating> 1.0
    cdef int lda = n, ldb = k, ldc = n
    if floating is float:
        sgemm(tn, tn, &n, &m, &k, &alpha, bmat, &lda, amat, &ldb, &beta, cmat, &ldc)
    else:
        dgemm(tn, tn, &n, &m, &k, &alpha, bmat, &lda, amat, &ldb, &beta, cmat, &ldc)


def conv1d_forward(floating[:, :, ::1] x, floating[:, :, ::1] w, Py_ssize_t stride):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], t = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t t_out = (t - k) // stride + 1
    cdef Py_ssize_t cink = cin * k
    cdef Py_ssize_t ib, ic, ik, it

    if floating is float:
        y_np = np.empty((b, cout, t_out), dtype=np.float32)
        buf_np = np.empty((cink, t_out), dtype=np.float32)
    else:
        y_np = np.empty((b, cout, t_out), dtype=np.float64)
        buf_np = np.empty((cink, t_out), dtype=np.float64)
    cdef floating[:, :, ::1] y = y_np
    cdef floating[:, ::1] buf = buf_np

    for ib in range(b):
        for ic in range(cin):
            for ik in range(k):
                for it in range(t_out):
                    buf[ic * k + ik, it] = x[ib, ic, it * stride + ik]
        _gemm_rm(&w[0, 0, 0], &buf[0, 0], &y[ib, 0, 0],
                 <int> cout, <int> t_out, <int> cink, <floating> 0.0)
    return y_np


def conv1d_backward_data(floating[:, :, ::1] grad_y, floating[:, :, ::1] w,
                         Py_ssize_t stride, Py_ssize_t t_in):
    cdef Py_ssize_t b = grad_y.shape[0], cout = grad_y.shape[1], t_out = grad_y.shape[2]
    cdef Py_ssize_t cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t cink = cin * k
    cdef Py_ssize_t ib, ic, io, ik, it, row

    if floating is float:
        gx_np = np.zeros((b, cin, t_in), dtype=np.float32)
        wt_np = np.empty((cink, cout), dtype=np.float32)
        gcols_np = np.empty((cink, t_out), dtype=np.float32)
    else:
        gx_np = np.zeros((b, cin, t_in), dtype=np.float64)
        wt_np = np.empty((cink, cout), dtype=np.float64)
        gcols_np = np.empty((cink, t_out), dtype=np.float64)
    cdef floating[:, :, ::1] gx = gx_np
    cdef floating[:, ::1] wt = wt_np
    cdef floating[:, ::1] gcols = gcols_np

    for io in range(cout):
        for ic in range(cin):
            for ik in range(k):
                wt[ic * k + ik, io] = w[io, ic, ik]

    for ib in range(b):
        _gemm_rm(&wt[0, 0], &grad_y[ib, 0, 0], &gcols[0, 0],
                 <int> cink, <int> t_out, <int> cout, <floating> 0.0)
        for ic in range(cin):
            for ik in range(k):
                row = ic * k + ik
                for it in range(t_out):
                    gx[ib, ic, it * stride + ik] += gcols[row, it]
    return gx_np


def conv1d_backward_weight(floating[:, :, ::1] grad_y, floating[:, :, ::1] x,
                           Py_ssize_t stride, Py_ssize_t kernel):
    cdef Py_ssize_t b = grad_y.shape[0], cout = grad_y.shape[1], t_out = grad_y.shape[2]
    cdef Py_ssize_t cin = x.shape[1]
    cdef Py_ssize_t cink = cin * kernel
    cdef Py_ssize_t ib, ic, ik, it

    if floating is float:
        gw_np = np.zeros((cout, cin, kernel), dtype=np.float32)
        buf_np = np.empty((t_out, cink), dtype=np.float32)
    else:
        gw_np = np.zeros((cout, cin, kernel), dtype=np.float64)
        buf_np = np.empty((t_out, cink), dtype=np.float64)
    cdef floating[:, :, ::1] gw = gw_np
    cdef floating[:, ::1] buf = buf_np

    for ib in range(b):
        for it in range(t_out):
            for ic in range(cin):
                for ik in range(kernel):
                    buf[it, ic * kernel + ik] = x[ib, ic, it * stride + ik]
        _gemm_rm(&grad_y[ib, 0, 0], &buf[0, 0], &gw[0, 0, 0],
                 <int> cout, <int> cink, <int> t_out, <floating> 1.0)
    return gw_np
