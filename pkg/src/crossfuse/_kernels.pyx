# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: valid 3D cross-correlation and fused attention.

The convolution gathers input windows into a tap-major column matrix
``[C*k^3, B*D'*H'*W']`` with a tight C loop, hands the two GEMMs to BLAS
through numpy, and scatters column gradients back with a C loop. Attention
uses BLAS for the three products and a single C pass per score row for the
softmax and its backward, so no intermediate score arrays are allocated.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef void _gather(const double* xp, double* cols, Py_ssize_t B, Py_ssize_t C,
                  Py_ssize_t D, Py_ssize_t H, Py_ssize_t W, Py_ssize_t k, Py_ssize_t s,
                  Py_ssize_t Do, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t c, i, j, l, b, d, h, q, src
    cdef Py_ssize_t n = 0
    for c in range(C):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    for b in range(B):
                        for d in range(Do):
                            for h in range(Ho):
                                src = (((b * C + c) * D + d * s + i) * H + h * s + j) * W + l
                                for q in range(Wo):
                                    cols[n] = xp[src + q * s]
                                    n += 1


cdef void _scatter(const double* gcols, double* gx, Py_ssize_t B, Py_ssize_t C,
                   Py_ssize_t D, Py_ssize_t H, Py_ssize_t W, Py_ssize_t k, Py_ssize_t s,
                   Py_ssize_t Do, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t c, i, j, l, b, d, h, q, dst
    cdef Py_ssize_t n = 0
    for c in range(C):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    for b in range(B):
                        for d in range(Do):
                            for h in range(Ho):
                                dst = (((b * C + c) * D + d * s + i) * H + h * s + j) * W + l
                                for q in range(Wo):
                                    gx[dst + q * s] += gcols[n]
                                    n += 1


def _columns(cnp.ndarray[double, ndim=5, mode="c"] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = (D - k) // stride + 1
    cdef Py_ssize_t Ho = (H - k) // stride + 1
    cdef Py_ssize_t Wo = (W - k) // stride + 1
    cols_arr = np.empty((C * k * k * k, B * Do * Ho * Wo), dtype=np.float64)
    cdef double* cols = <double*> cnp.PyArray_DATA(cols_arr)
    cdef const double* xp = <double*> x.data
    with nogil:
        _gather(xp, cols, B, C, D, H, W, k, stride, Do, Ho, Wo)
    return cols_arr, (Do, Ho, Wo)


def conv3d_forward(cnp.ndarray[double, ndim=5, mode="c"] x,
                   cnp.ndarray[double, ndim=5, mode="c"] w, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], O = w.shape[0], k = w.shape[2]
    cols, (Do, Ho, Wo) = _columns(x, k, stride)
    out = w.reshape(O, -1) @ cols
    return np.ascontiguousarray(out.reshape(O, B, Do, Ho, Wo).transpose(1, 0, 2, 3, 4))


def conv3d_backward(cnp.ndarray[double, ndim=5, mode="c"] x,
                    cnp.ndarray[double, ndim=5, mode="c"] w,
                    cnp.ndarray[double, ndim=5, mode="c"] gout,
                    Py_ssize_t stride, bint need_input_grad=True):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Do = gout.shape[2], Ho = gout.shape[3], Wo = gout.shape[4]
    cols, _ = _columns(x, k, stride)
    g = np.ascontiguousarray(gout.transpose(1, 0, 2, 3, 4)).reshape(O, -1)
    gw = (g @ cols.T).reshape(O, C, k, k, k)
    if not need_input_grad:
        return None, gw
    gcols_arr = np.ascontiguousarray(w.reshape(O, -1).T @ g)
    gx_arr = np.zeros((B, C, D, H, W), dtype=np.float64)
    cdef const double* gcols = <double*> cnp.PyArray_DATA(gcols_arr)
    cdef double* gx = <double*> cnp.PyArray_DATA(gx_arr)
    with nogil:
        _scatter(gcols, gx, B, C, D, H, W, k, stride, Do, Ho, Wo)
    return gx_arr, gw


cdef void _softmax_rows(double* P, Py_ssize_t rows, Py_ssize_t cols,
                        double scale) noexcept nogil:
    cdef Py_ssize_t r, i
    cdef double mx, tot, z
    cdef double* row
    for r in range(rows):
        row = P + r * cols
        mx = row[0]
        for i in range(1, cols):
            if row[i] > mx:
                mx = row[i]
        tot = 0.0
        for i in range(cols):
            z = exp((row[i] - mx) * scale)
            row[i] = z
            tot = tot + z
        tot = 1.0 / tot
        for i in range(cols):
            row[i] = row[i] * tot


cdef void _softmax_rows_backward(double* G, const double* P, Py_ssize_t rows,
                                 Py_ssize_t cols, double scale) noexcept nogil:
    cdef Py_ssize_t r, i
    cdef double dot
    cdef double* grow
    cdef const double* prow
    for r in range(rows):
        grow = G + r * cols
        prow = P + r * cols
        dot = 0.0
        for i in range(cols):
            dot = dot + grow[i] * prow[i]
        for i in range(cols):
            grow[i] = prow[i] * (grow[i] - dot) * scale


def attend_forward(a, b, v, double scale):
    """``P = softmax(scale * a @ b^T, axis=-1)``, ``O = P @ v``; returns (O, P).

    ``scale`` must be positive (the row maximum is taken before scaling).
    """
    cdef cnp.ndarray p_arr = np.ascontiguousarray(a @ np.swapaxes(b, -1, -2), dtype=np.float64)
    cdef Py_ssize_t cols = p_arr.shape[p_arr.ndim - 1]
    cdef Py_ssize_t rows = p_arr.size // cols if cols else 0
    cdef double* P = <double*> cnp.PyArray_DATA(p_arr)
    with nogil:
        _softmax_rows(P, rows, cols, scale)
    return p_arr @ v, p_arr


def attend_backward(a, b, v, p, go, double scale):
    cdef cnp.ndarray gl_arr = np.ascontiguousarray(go @ np.swapaxes(v, -1, -2), dtype=np.float64)
    cdef cnp.ndarray p_c = np.ascontiguousarray(p, dtype=np.float64)
    cdef Py_ssize_t cols = gl_arr.shape[gl_arr.ndim - 1]
    cdef Py_ssize_t rows = gl_arr.size // cols if cols else 0
    cdef double* G = <double*> cnp.PyArray_DATA(gl_arr)
    cdef const double* P = <double*> cnp.PyArray_DATA(p_c)
    with nogil:
        _softmax_rows_backward(G, P, rows, cols, scale)
    ga = gl_arr @ b
    gb = np.swapaxes(gl_arr, -1, -2) @ a
    gv = np.swapaxes(p_c, -1, -2) @ go
    return ga, gb, gv
