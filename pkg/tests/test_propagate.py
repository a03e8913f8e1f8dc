import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from snippetprop import numerics as nx
from snippetprop.propagate import (
    PropagationConfig, affinity, bench_birw, birw_closed_form, birw_iterate, propagate,
    propagate_both, random_instance, transition, vanilla_rw,
)
from snippetprop.summarize import em_e_step, em_m_step

seeds = st.integers(0, 2**31 - 1)


def instance(seed, d=None):
    rng = np.random.default_rng(seed)
    l, n = int(rng.integers(2, 30)), int(rng.integers(1, 9))
    w = float(rng.choice(np.arange(1, 10) / 10))
    f, mu, z = random_instance(rng, l, n, d or int(rng.integers(1, 8)))
    return f, mu, z, w


def symmetric_doubly_stochastic(rng, l, terms=4):
    z = np.zeros((l, l))
    for a in rng.dirichlet(np.ones(terms)):
        p = np.eye(l)[rng.permutation(l)]
        z += a * (p + p.T) / 2
    return z


def in_hull_bruteforce(p, pts, tol=1e-9):
    """Carathéodory: p is in the hull iff it is in some simplex spanned by d+1 points."""
    d = pts.shape[1]
    for idx in itertools.combinations(range(len(pts)), min(d + 1, len(pts))):
        s = pts[list(idx)]
        a = np.vstack([s.T, np.ones(len(s))])
        b = np.append(p, 1.0)
        lam, *_ = np.linalg.lstsq(a, b, rcond=None)
        if np.abs(a @ lam - b).max() < 1e-9 and (lam >= -tol).all():
            return True
    return False


def test_w_zero_is_identity(rng):
    f, mu, z = random_instance(rng, 10, 3)
    np.testing.assert_array_equal(birw_iterate(f, mu, z, 0.0, 5), f)
    np.testing.assert_allclose(birw_closed_form(f, mu, z, 0.0), f, atol=1e-14)
    np.testing.assert_allclose(vanilla_rw(f, affinity(f, f, 5.0), 0.0), f, atol=1e-14)


def test_one_round_by_hand(rng):
    f, mu, z = random_instance(rng, 6, 2, 3)
    w = 0.3
    zn = z / z.sum(axis=0)
    m1 = w * zn.T @ f + (1 - w) * mu
    np.testing.assert_allclose(birw_iterate(f, mu, z, w, 1), w * z @ m1 + (1 - w) * f, atol=1e-13)


def test_closed_form_oracle(rng):
    f, mu, z = random_instance(rng, 12, 4, 5)
    w = 0.7
    r = z @ (z / z.sum(axis=0)).T
    expect = (1 - w) * np.linalg.solve(np.eye(12) - w * w * r, w * z @ mu + f)
    np.testing.assert_allclose(birw_closed_form(f, mu, z, w), expect, atol=1e-12)


@given(seeds)
def test_iterate_converges_to_closed_form(seed):
    f, mu, z, w = instance(seed)
    t = 100 if w < 0.85 else 250
    np.testing.assert_allclose(birw_iterate(f, mu, z, w, t), birw_closed_form(f, mu, z, w), atol=1e-6)


@given(seeds)
def test_error_contracts_by_w_squared(seed):
    f, mu, z, w = instance(seed)
    ref = birw_closed_form(f, mu, z, w)
    errs = [np.abs(birw_iterate(f, mu, z, w, t) - ref).max() for t in range(1, 12)]
    for a, b in zip(errs, errs[1:]):
        assert b <= w * w * a + 1e-12


@given(seeds)
def test_transition_rows_sum_to_one(seed):
    _, _, z, _ = instance(seed)
    np.testing.assert_allclose(transition(z).sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 12), st.floats(0.05, 0.95))
def test_degenerate_identity(seed, l, w):
    rng = np.random.default_rng(seed)
    z = symmetric_doubly_stochastic(rng, l)
    f = rng.standard_normal((l, 3))
    np.testing.assert_allclose(birw_closed_form(f, f, z, w), vanilla_rw(f, z, w), atol=1e-8)


@given(seeds)
def test_output_in_envelope(seed):
    f, mu0, _, w = instance(seed)
    mu = em_m_step(f, em_e_step(f, mu0, 5.0))
    out = birw_closed_form(f, mu, affinity(f, mu, 5.0), w)
    assert (out >= f.min(0) - 1e-9).all() and (out <= f.max(0) + 1e-9).all()


@pytest.mark.parametrize("seed", range(5))
def test_output_in_convex_hull_low_dim(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((7, 2))
    mu = em_m_step(f, em_e_step(f, rng.standard_normal((2, 2)), 5.0))
    out = birw_closed_form(f, mu, affinity(f, mu, 5.0), 0.6)
    for row in np.vstack([mu, out]):
        assert in_hull_bruteforce(row, f)
    assert not in_hull_bruteforce(f.max(0) + 1.0, f)


def test_vanilla_modes_agree(rng):
    f = rng.standard_normal((9, 3))
    z = affinity(f, f, 5.0)
    w = 0.4
    np.testing.assert_allclose(vanilla_rw(f, z, w, "iterative", 200), vanilla_rw(f, z, w), atol=1e-10)
    np.testing.assert_allclose(vanilla_rw(f, z, w, "single_step"), vanilla_rw(f, z, w, "iterative", 1))
    with pytest.raises(ValueError):
        vanilla_rw(f, z, w, "other")
    with pytest.raises(nx.MatrixError):
        vanilla_rw(f, z[:, :3], w)


def test_propagate_dispatch_and_both(rng):
    f, mu, _ = random_instance(rng, 8, 3, 4)
    closed, z = propagate(f, mu, PropagationConfig(w=0.5))
    np.testing.assert_allclose(z, affinity(f, mu, 5.0))
    it, _ = propagate(f, mu, PropagationConfig(w=0.5, mode="iterative", iterations=80))
    np.testing.assert_allclose(it, closed, atol=1e-9)
    fa, fe = propagate_both(f, mu, None, PropagationConfig())
    assert fe is None
    np.testing.assert_allclose(fa, closed)
    with pytest.raises(ValueError):
        propagate_both(f, None, mu, PropagationConfig())
    with pytest.raises(ValueError):
        PropagationConfig(w=1.0)


def test_shape_checks(rng):
    f, mu, z = random_instance(rng, 5, 2, 3)
    with pytest.raises(nx.MatrixError):
        birw_closed_form(f, mu, z[:, :1], 0.5)
    with pytest.raises(ValueError):
        birw_iterate(f, mu, z, 0.5, 0)


def test_bench_rows():
    rows = list(bench_birw(ls=(8,), ns=(2,), ts=range(1, 6), w=0.5, repeats=1))
    assert [r["mode"] for r in rows] == ["closed_form"] + ["iterative"] * 5
    errs = [r["max_err_vs_closed"] for r in rows[1:]]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    zero = list(bench_birw(ls=(8,), ns=(2,), ts=(1, 2), w=0.0, repeats=1))
    assert all(r["max_err_vs_closed"] == 0.0 for r in zero)
