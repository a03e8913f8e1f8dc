"""Dense float64 kernels shared by every other module.

Matrices are plain C-contiguous ``float64`` numpy arrays. The heavy lifting
happens in ``snippetprop._kernels`` (Cython) when it has been compiled, and
in ``snippetprop._kernels_py`` otherwise. Set ``SNIPPETPROP_BACKEND`` to
``python`` or ``compiled`` to force one; ``auto`` (the default) prefers the
compiled build.
"""
import contextlib
import os

import numpy as np

from snippetprop import _kernels_py
from snippetprop._errors import SingularMatrixError

try:
    from snippetprop import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

__all__ = [
    "SingularMatrixError", "MatrixError", "as_mat", "available_backends",
    "backend", "use_backend", "set_backend", "matmul", "matmul_tn", "matmul_nt",
    "row_softmax", "col_softmax", "l2_normalize_rows", "row_norms",
    "l1_normalize_cols", "solve", "semi_orthogonal_init", "cosine_sim",
]

SOLVE_RTOL = 1e-13


class MatrixError(ValueError):
    """Shape or finiteness violation in a kernel input."""


def available_backends():
    return ("compiled", "python") if _compiled is not None else ("python",)


def _pick(name):
    if name in ("auto", "", None):
        return _compiled if _compiled is not None else _kernels_py
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("snippetprop._kernels is not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


_k = _pick(os.environ.get("SNIPPETPROP_BACKEND", "auto"))


def backend():
    """Name of the active kernel backend: ``"compiled"`` or ``"python"``."""
    return _k.BACKEND


def set_backend(name):
    global _k
    _k = _pick(name)
    return _k.BACKEND


@contextlib.contextmanager
def use_backend(name):
    prev = _k.BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def as_mat(x, name="matrix"):
    """Coerce to a finite, C-contiguous float64 2-D array or raise MatrixError."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise MatrixError(f"{name}: expected a 2-D matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise MatrixError(f"{name}: contains NaN or Inf")
    return a


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_2d(a, name):
    if a.ndim != 2:
        raise MatrixError(f"{name}: expected a 2-D matrix, got shape {a.shape}")


def matmul(a, b):
    a, b = _c(a), _c(b)
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise MatrixError(f"matmul: {a.shape} x {b.shape} dimension mismatch")
    return _k.matmul(a, b)


def matmul_tn(a, b):
    """``a.T @ b``."""
    a, b = _c(a), _c(b)
    if a.shape[0] != b.shape[0]:
        raise MatrixError(f"matmul_tn: {a.shape}^T x {b.shape} dimension mismatch")
    return _k.matmul_tn(a, b)


def matmul_nt(a, b):
    """``a @ b.T``."""
    a, b = _c(a), _c(b)
    if a.shape[1] != b.shape[1]:
        raise MatrixError(f"matmul_nt: {a.shape} x {b.shape}^T dimension mismatch")
    return _k.matmul_nt(a, b)


def row_softmax(m, scale=1.0):
    """Softmax of ``scale * m`` along each row, max-subtracted."""
    m = _c(m)
    _check_2d(m, "m")
    if m.shape[1] == 0:
        return m.copy()
    return _k.row_softmax(m, float(scale))


def col_softmax(m, scale=1.0):
    m = _c(m)
    _check_2d(m, "m")
    if m.shape[0] == 0:
        return m.copy()
    return _k.col_softmax(m, float(scale))


def l2_normalize_rows(m):
    """Unit-norm rows; all-zero rows stay zero."""
    m = _c(m)
    _check_2d(m, "m")
    return _k.l2_normalize_rows(m)


def row_norms(m):
    return _k.row_norms(_c(m))


def l1_normalize_cols(m):
    """Scale each column to sum to one. Columns summing to zero stay zero.

    Raises ValueError on negative entries, which only appear when this is
    used outside a softmax pipeline.
    """
    m = _c(m)
    _check_2d(m, "m")
    return _k.l1_normalize_cols(m)


def lu_factor(a):
    a = _c(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MatrixError(f"lu_factor: expected a square matrix, got {a.shape}")
    return _k.lu_factor(a, SOLVE_RTOL)


def lu_solve(factors, b):
    lu, perm = factors
    b = _c(b)
    if b.ndim == 1:
        return _k.lu_solve(lu, perm, b[:, None])[:, 0]
    return _k.lu_solve(lu, perm, b)


def solve(a, b):
    """Solve ``a @ x = b`` by partial-pivot LU. Never forms an inverse.

    Raises SingularMatrixError (carrying ``.pivot``) when a pivot falls below
    ``SOLVE_RTOL * max|a|``.
    """
    a, b = _c(a), _c(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MatrixError(f"solve: expected a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise MatrixError(f"solve: right-hand side has {b.shape[0]} rows, expected {a.shape[0]}")
    return lu_solve(lu_factor(a), b)


def semi_orthogonal_init(rows, cols, seed):
    """Seeded matrix with orthonormal rows (or columns when rows > cols)."""
    if rows < 1 or cols < 1:
        raise MatrixError(f"semi_orthogonal_init: empty shape ({rows}, {cols})")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    # sign fix makes the factorisation unique
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    out = q.T if rows <= cols else q
    return np.ascontiguousarray(out)


def cosine_sim(a, b):
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``.

    Zero rows have similarity 0 with everything.
    """
    a, b = _c(a), _c(b)
    if a.ndim == 1:
        a = a[None, :]
    if b.ndim == 1:
        b = b[None, :]
    if a.shape[1] != b.shape[1]:
        raise MatrixError(f"cosine_sim: feature dims differ ({a.shape[1]} vs {b.shape[1]})")
    return _k.matmul_nt(_k.l2_normalize_rows(a), _k.l2_normalize_rows(b))
