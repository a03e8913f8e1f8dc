# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense kernels.

Every loop accumulates left to right in row-major order, so results are
bitwise reproducible for identical inputs. No -ffast-math: reassociation
would break that.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs

cnp.import_array()

from snippetprop._errors import SingularMatrixError

BACKEND = "compiled"


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double aip
    if b.shape[0] != k:
        raise ValueError(f"matmul: inner dimensions differ ({k} vs {b.shape[0]})")
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    # i-p-j order: o[i, j] still accumulates p = 0..k-1 left to right
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                o[i, j] += aip * b[p, j]
    return out


def matmul_tn(const double[:, ::1] a, const double[:, ::1] b):
    """a.T @ b without materialising the transpose."""
    cdef Py_ssize_t k = a.shape[0], n = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double api
    if b.shape[0] != k:
        raise ValueError(f"matmul_tn: inner dimensions differ ({k} vs {b.shape[0]})")
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for p in range(k):
            api = a[p, i]
            for j in range(m):
                o[i, j] += api * b[p, j]
    return out


def matmul_nt(const double[:, ::1] a, const double[:, ::1] b):
    """a @ b.T without materialising the transpose."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double acc
    if b.shape[1] != k:
        raise ValueError(f"matmul_nt: inner dimensions differ ({k} vs {b.shape[1]})")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            o[i, j] = acc
    return out


def row_softmax(const double[:, ::1] x, double scale):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, v, total
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        mx = scale * x[i, 0]
        for j in range(1, m):
            v = scale * x[i, j]
            if v > mx:
                mx = v
        total = 0.0
        for j in range(m):
            v = exp(scale * x[i, j] - mx)
            o[i, j] = v
            total += v
        for j in range(m):
            o[i, j] = o[i, j] / total
    return out


def col_softmax(const double[:, ::1] x, double scale):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double v
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] mx = np.empty(m, dtype=np.float64)
    cdef double[::1] total = np.zeros(m, dtype=np.float64)
    for j in range(m):
        mx[j] = scale * x[0, j]
    for i in range(1, n):
        for j in range(m):
            v = scale * x[i, j]
            if v > mx[j]:
                mx[j] = v
    for i in range(n):
        for j in range(m):
            v = exp(scale * x[i, j] - mx[j])
            o[i, j] = v
            total[j] += v
    for i in range(n):
        for j in range(m):
            o[i, j] = o[i, j] / total[j]
    return out


def l2_normalize_rows(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double ss, nrm
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        ss = 0.0
        for j in range(m):
            ss += x[i, j] * x[i, j]
        if ss > 0.0:
            nrm = sqrt(ss)
            for j in range(m):
                o[i, j] = x[i, j] / nrm
    return out


def row_norms(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double ss
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        ss = 0.0
        for j in range(m):
            ss += x[i, j] * x[i, j]
        o[i] = sqrt(ss)
    return out


def l1_normalize_cols(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] total = np.zeros(m, dtype=np.float64)
    for i in range(n):
        for j in range(m):
            if x[i, j] < 0.0:
                raise ValueError(
                    f"l1_normalize_cols: negative entry {x[i, j]!r} at ({i}, {j})")
            total[j] += x[i, j]
    for i in range(n):
        for j in range(m):
            if total[j] > 0.0:
                o[i, j] = x[i, j] / total[j]
    return out


def lu_factor(const double[:, ::1] a, double rtol):
    """Doolittle LU with partial pivoting. Returns (lu, perm)."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k, p
    cdef double big, v, piv, f, amax = 0.0
    if a.shape[1] != n:
        raise ValueError(f"lu_factor: matrix must be square, got {n}x{a.shape[1]}")
    lu_arr = np.array(a, dtype=np.float64, copy=True, order="C")
    perm_arr = np.arange(n, dtype=np.intp)
    cdef double[:, ::1] lu = lu_arr
    cdef Py_ssize_t[::1] perm = perm_arr
    for i in range(n):
        for j in range(n):
            v = fabs(lu[i, j])
            if v > amax:
                amax = v
    cdef double tol = rtol * amax
    for k in range(n):
        p = k
        big = fabs(lu[k, k])
        for i in range(k + 1, n):
            v = fabs(lu[i, k])
            if v > big:
                big = v
                p = i
        if big <= tol or big == 0.0:
            raise SingularMatrixError(k)
        if p != k:
            for j in range(n):
                v = lu[k, j]
                lu[k, j] = lu[p, j]
                lu[p, j] = v
            perm[k], perm[p] = perm[p], perm[k]
        piv = lu[k, k]
        for i in range(k + 1, n):
            f = lu[i, k] / piv
            lu[i, k] = f
            if f != 0.0:
                for j in range(k + 1, n):
                    lu[i, j] -= f * lu[k, j]
    return lu_arr, perm_arr


def lu_solve(const double[:, ::1] lu, const Py_ssize_t[::1] perm, const double[:, ::1] b):
    cdef Py_ssize_t n = lu.shape[0], m = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    if b.shape[0] != n:
        raise ValueError(f"lu_solve: right-hand side has {b.shape[0]} rows, expected {n}")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] x = out
    for i in range(n):
        for j in range(m):
            x[i, j] = b[perm[i], j]
    for i in range(n):
        for k in range(i):
            acc = lu[i, k]
            if acc != 0.0:
                for j in range(m):
                    x[i, j] -= acc * x[k, j]
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            acc = lu[i, k]
            if acc != 0.0:
                for j in range(m):
                    x[i, j] -= acc * x[k, j]
        acc = lu[i, i]
        for j in range(m):
            x[i, j] = x[i, j] / acc
    return out
