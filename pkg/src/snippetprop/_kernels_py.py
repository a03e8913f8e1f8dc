"""Pure-Python (numpy) twin of the compiled kernels.

Selected automatically when ``_kernels`` was not built. Results agree with
the compiled path to rounding, but summation order follows BLAS rather than
strict left-to-right accumulation.
"""
import numpy as np

from snippetprop._errors import SingularMatrixError

BACKEND = "python"


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})")
    return np.ascontiguousarray(a @ b)


def matmul_tn(a, b):
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul_tn: inner dimensions differ ({a.shape[0]} vs {b.shape[0]})")
    return np.ascontiguousarray(a.T @ b)


def matmul_nt(a, b):
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt: inner dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    return np.ascontiguousarray(a @ b.T)


def row_softmax(x, scale):
    s = scale * x
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def col_softmax(x, scale):
    s = scale * x
    e = np.exp(s - s.max(axis=0, keepdims=True))
    return np.ascontiguousarray(e / e.sum(axis=0, keepdims=True))


def row_norms(x):
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def l2_normalize_rows(x):
    nrm = row_norms(x)
    out = np.zeros_like(x)
    nz = nrm > 0
    out[nz] = x[nz] / nrm[nz, None]
    return out


def l1_normalize_cols(x):
    neg = np.argwhere(x < 0)
    if len(neg):
        i, j = neg[0]
        raise ValueError(f"l1_normalize_cols: negative entry {x[i, j]!r} at ({i}, {j})")
    total = x.sum(axis=0)
    out = np.zeros_like(x)
    nz = total > 0
    out[:, nz] = x[:, nz] / total[nz]
    return out


def lu_factor(a, rtol):
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"lu_factor: matrix must be square, got {n}x{a.shape[1]}")
    lu = np.array(a, dtype=np.float64, copy=True)
    perm = np.arange(n, dtype=np.intp)
    tol = rtol * (np.abs(lu).max() if n else 0.0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        big = abs(lu[p, k])
        if big <= tol or big == 0.0:
            raise SingularMatrixError(k)
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm


def lu_solve(lu, perm, b):
    n = lu.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"lu_solve: right-hand side has {b.shape[0]} rows, expected {n}")
    x = np.array(b[perm], dtype=np.float64)
    for i in range(n):
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] -= lu[i, i + 1:] @ x[i + 1:]
        x[i] /= lu[i, i]
    return x
