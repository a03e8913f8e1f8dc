"""Bipartite random-walk propagation of representative snippets into features.

Snippets and representatives form a complete bipartite graph with
row-stochastic affinity ``z`` (l x n). One round pulls the means towards
the snippets through ``N1(z)^T`` and the snippets towards the means through
``z``, each time mixing back a ``1 - w`` share of the starting point. The
fixed point of infinitely many rounds is a single linear solve with
``I - w^2 z N1(z)^T``, which is row-(sub)stochastic, so it is always
well-posed for ``w < 1``.
"""
from dataclasses import dataclass
import time

import numpy as np

from snippetprop import numerics as nx
from snippetprop.summarize import em_e_step

MODES = ("closed_form", "iterative", "vanilla_rw")


@dataclass
class PropagationConfig:
    w: float = 0.5
    mode: str = "closed_form"
    iterations: int = 3
    lam: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.w < 1.0:
            raise ValueError(f"w must lie in [0, 1), got {self.w}")
        if self.mode not in MODES:
            raise ValueError(f"unknown propagation mode {self.mode!r}")
        if self.mode == "iterative" and self.iterations < 1:
            raise ValueError("iterative mode needs iterations >= 1")


def affinity(f, mu, lam):
    return em_e_step(f, mu, lam)


def transition(z):
    """``R = z N1(z)^T`` (l x l)."""
    return nx.matmul_nt(z, nx.l1_normalize_cols(z))


def _check(f, mu, z):
    if z.shape != (f.shape[0], mu.shape[0]):
        raise nx.MatrixError(f"affinity shape {z.shape} does not match f {f.shape} and mu {mu.shape}")
    if f.shape[1] != mu.shape[1]:
        raise nx.MatrixError(f"feature dims differ ({f.shape[1]} vs {mu.shape[1]})")


def birw_iterate(f, mu, z, w, t):
    """Run ``t`` unrolled rounds and return the snippet features after the last one."""
    _check(f, mu, z)
    if t < 1:
        raise ValueError("t must be >= 1")
    zn = nx.l1_normalize_cols(z)
    feats, means = f, mu
    for _ in range(t):
        means = w * nx.matmul_tn(zn, feats) + (1 - w) * mu
        feats = w * nx.matmul(z, means) + (1 - w) * f
    return feats


def birw_closed_form(f, mu, z, w):
    """``(1-w) (I - w^2 z N1(z)^T)^{-1} (w z mu + f)`` via LU solve."""
    _check(f, mu, z)
    a = np.eye(f.shape[0]) - (w * w) * transition(z)
    b = w * nx.matmul(z, mu) + f
    return (1 - w) * nx.solve(a, b)


def vanilla_rw(f, z_ff, w, mode="closed_form", iterations=1):
    """Plain random walk over snippets with self-affinity ``z_ff`` (l x l).

    ``closed_form`` returns ``(1-w) (I - w z_ff)^{-1} f``; ``single_step``
    returns ``w z_ff f + (1-w) f``; ``iterative`` unrolls that recursion.
    """
    if z_ff.shape != (f.shape[0], f.shape[0]):
        raise nx.MatrixError(f"self-affinity must be {f.shape[0]}x{f.shape[0]}, got {z_ff.shape}")
    if mode == "closed_form":
        return (1 - w) * nx.solve(np.eye(f.shape[0]) - w * z_ff, f)
    if mode == "single_step":
        return w * nx.matmul(z_ff, f) + (1 - w) * f
    if mode == "iterative":
        out = f
        for _ in range(iterations):
            out = w * nx.matmul(z_ff, out) + (1 - w) * f
        return out
    raise ValueError(f"unknown vanilla_rw mode {mode!r}")


def propagate(f, mu, cfg, z=None):
    """Propagate one set of representatives; returns (features, affinity used)."""
    if cfg.mode == "vanilla_rw":
        z = affinity(f, f, cfg.lam) if z is None else z
        return vanilla_rw(f, z, cfg.w), z
    z = affinity(f, mu, cfg.lam) if z is None else z
    if cfg.mode == "iterative":
        return birw_iterate(f, mu, z, cfg.w, cfg.iterations), z
    return birw_closed_form(f, mu, z, cfg.w), z


def propagate_both(f, mu_a, mu_e, cfg):
    """Intra- and inter-video propagation, kept separate (not concatenated).

    ``mu_e`` may be None when the memory bank is unavailable; the second
    output is then None as well.
    """
    if mu_a is None or len(mu_a) == 0:
        raise ValueError("intra-video representatives are required")
    fa, _ = propagate(f, mu_a, cfg)
    fe = None if mu_e is None else propagate(f, mu_e, cfg)[0]
    return fa, fe


# -- benchmark hook ------------------------------------------------------------

BENCH_FIELDS = ("l", "n", "mode", "t", "wall_ns", "max_err_vs_closed")


def random_instance(rng, l, n, d=None, lam=5.0):
    d = d or 16
    f = rng.standard_normal((l, d))
    mu = rng.standard_normal((n, d))
    return f, mu, affinity(f, mu, lam)


def _time(fn, repeats):
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        out = fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return out, best


def bench_birw(ls=(8, 16, 32, 64), ns=(2, 4, 8), ts=range(1, 65), w=0.5, seed=0, repeats=3, d=16):
    """Yield benchmark rows comparing unrolled iterations with the closed form.

    The closed-form row carries ``t = 0`` and error 0 by definition.
    """
    rng = np.random.default_rng(seed)
    for l in ls:
        for n in ns:
            f, mu, z = random_instance(rng, l, n, d)
            ref, ns_closed = _time(lambda: birw_closed_form(f, mu, z, w), repeats)
            yield {"l": l, "n": n, "mode": "closed_form", "t": 0, "wall_ns": ns_closed, "max_err_vs_closed": 0.0}
            for t in ts:
                out, dt = _time(lambda: birw_iterate(f, mu, z, w, t), repeats)
                yield {"l": l, "n": n, "mode": "iterative", "t": t, "wall_ns": dt,
                       "max_err_vs_closed": float(np.abs(out - ref).max())}
