"""Timing of the compiled kernels against the pure-Python fallback."""
import time

import numpy as np

from snippetprop import numerics as nx

KERNEL_FIELDS = ("kernel", "size", "backend", "best_ns", "max_abs_diff")


def _cases(rng, m):
    a = rng.standard_normal((m, m))
    b = rng.standard_normal((m, 16))
    mu = rng.standard_normal((8, m))
    spd = a @ a.T / m + np.eye(m)
    return {
        "matmul": lambda: nx.matmul(a, b),
        "row_softmax": lambda: nx.row_softmax(a, 5.0),
        "l2_normalize_rows": lambda: nx.l2_normalize_rows(a),
        "cosine_sim": lambda: nx.cosine_sim(a, mu),
        "solve": lambda: nx.solve(spd, b),
    }


def _best(fn, repeats):
    best, out = None, None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        out = fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return out, best


def bench_kernels(sizes=(16, 64, 256), repeats=5, seed=0):
    """Rows of best-of-``repeats`` wall time per kernel, size and backend.

    ``max_abs_diff`` compares each backend's result with the first backend's.
    """
    rows = []
    backends = nx.available_backends()
    for m in sizes:
        ref = {}
        for name in backends:
            with nx.use_backend(name):
                cases = _cases(np.random.default_rng([seed, m]), m)
                for kernel, fn in cases.items():
                    out, best = _best(fn, repeats)
                    base = ref.setdefault(kernel, out)
                    rows.append({"kernel": kernel, "size": m, "backend": name, "best_ns": best,
                                 "max_abs_diff": float(np.abs(out - base).max())})
    return rows
