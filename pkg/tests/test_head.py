import numpy as np
import pytest
from hypothesis import given, strategies as st

from snippetprop import head as hd
from snippetprop import numerics as nx

seeds = st.integers(0, 2**31 - 1)


def random_head(seed):
    rng = np.random.default_rng(seed)
    c, d, l = int(rng.integers(1, 6)), int(rng.integers(1, 10)), int(rng.integers(1, 40))
    params = hd.HeadParams.init(c, d, rng, float(rng.uniform(1, 12)))
    return rng.standard_normal((l, d)) * rng.uniform(0.1, 10), params


@given(seeds)
def test_forward_distributions(seed):
    f, params = random_head(seed)
    out = hd.forward(f, params)
    c1 = params.num_classes + 1
    assert out.tcam.shape == (len(f), c1)
    np.testing.assert_allclose(out.tcam.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.lambda_w.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.p_ca.sum(), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.p_mil.sum(), 1.0, atol=1e-12)
    assert ((out.lambda_f > 0) & (out.lambda_f < 1)).all()


def test_forward_by_hand(rng):
    f = rng.standard_normal((5, 3))
    params = hd.HeadParams.init(2, 3, rng, 8.0)
    out = hd.forward(f, params)
    cos = lambda a, b: (a / np.linalg.norm(a, axis=1, keepdims=True)) @ (b / np.linalg.norm(b, axis=1, keepdims=True)).T
    lam = 1 / (1 + np.exp(-8 * cos(f, params.w_f)[:, 0]))
    np.testing.assert_allclose(out.lambda_f, lam, atol=1e-13)
    pooled = (lam[:, None] * f).sum(0) / lam.sum()
    s = 8 * cos(f, params.w_a)
    np.testing.assert_allclose(out.s_logits, s, atol=1e-13)
    p = np.exp(8 * cos(pooled[None], params.w_a)[0])
    np.testing.assert_allclose(out.p_ca, p / p.sum(), atol=1e-13)
    lw = np.exp(s) / np.exp(s).sum(axis=0)
    mil = np.exp((lw * s).sum(0))
    np.testing.assert_allclose(out.p_mil, mil / mil.sum(), atol=1e-13)


def test_forward_rejects_wrong_dim(rng):
    params = hd.HeadParams.init(2, 3, rng)
    with pytest.raises(nx.MatrixError):
        hd.forward(np.ones((4, 5)), params)


def test_score_snippets_rows_sum_to_one(rng):
    params = hd.HeadParams.init(3, 4, rng)
    p = hd.score_snippets(rng.standard_normal((6, 4)), params)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_extended_targets():
    ca, mil = hd.extended_targets([1, 0, 1])
    np.testing.assert_allclose(ca, [0.5, 0, 0.5, 0])
    np.testing.assert_allclose(mil, [1 / 3, 0, 1 / 3, 1 / 3])
    with pytest.raises(ValueError):
        hd.extended_targets([0, 0])


def test_loss_att_extremes():
    assert hd.loss_att(np.r_[np.zeros(8), np.ones(8)]) == 0.0
    assert hd.loss_att(np.full(16, 0.5)) == pytest.approx(1.0)
    assert hd.attention_k(3) == 1 and hd.attention_k(40) == 5
    with pytest.raises(ValueError):
        hd.loss_att([])


def test_loss_kd_and_total():
    t = np.array([[0.5, 0.5], [0.9, 0.1]])
    assert hd.loss_kd(t, t) == pytest.approx(-(t * np.log(t)).sum() / 2)
    with pytest.raises(ValueError):
        hd.loss_kd(t, t[:1])
    total, parts = hd.loss_total(1.0, 2.0, 3.0, alpha=0.5, beta=0.1)
    assert total == pytest.approx(2.3) and parts["total"] == total


def test_loss_cls_is_cross_entropy(rng):
    params = hd.HeadParams.init(3, 4, rng)
    out = hd.forward(rng.standard_normal((7, 4)), params)
    y = np.array([0, 1, 0])
    expect = -np.log(out.p_ca[1]) - 0.2 * 0.5 * (np.log(out.p_mil[1]) + np.log(out.p_mil[3]))
    assert hd.loss_cls(out, y, 0.2) == pytest.approx(expect, rel=1e-12)
