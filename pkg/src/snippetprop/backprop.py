"""Vector-Jacobian products for the ops used in training.

Each ``*_vjp`` takes the forward inputs (and, where convenient, the forward
output) plus the gradient of the loss with respect to that output, and
returns gradients with respect to the inputs. They are validated against
central differences by ``pipeline.grad_check``.
"""
import numpy as np

from snippetprop import numerics as nx


def l2_normalize_rows_vjp(x, y, dy):
    r = nx.row_norms(x)
    dx = np.zeros_like(x)
    nz = r > 0
    proj = (y[nz] * dy[nz]).sum(axis=1, keepdims=True)
    dx[nz] = (dy[nz] - y[nz] * proj) / r[nz, None]
    return dx


def row_softmax_vjp(p, dp, scale=1.0):
    return scale * p * (dp - (p * dp).sum(axis=1, keepdims=True))


def col_softmax_vjp(p, dp, scale=1.0):
    return scale * p * (dp - (p * dp).sum(axis=0, keepdims=True))


def softmax_vjp(p, dp):
    return p * (dp - p @ dp)


def l1_normalize_cols_vjp(x, y, dy):
    total = x.sum(axis=0)
    dx = np.zeros_like(x)
    nz = total > 0
    dx[:, nz] = (dy[:, nz] - (dy[:, nz] * y[:, nz]).sum(axis=0)) / total[nz]
    return dx


def cosine_sim_vjp(a, b, ds):
    """Gradients of ``cos(a, b) = N2(a) N2(b)^T`` with respect to a and b."""
    an, bn = nx.l2_normalize_rows(a), nx.l2_normalize_rows(b)
    da = l2_normalize_rows_vjp(a, an, nx.matmul(ds, bn))
    db = l2_normalize_rows_vjp(b, bn, nx.matmul_tn(ds, an))
    return da, db


def em_e_step_vjp(f, mu, lam, z, dz):
    return cosine_sim_vjp(f, mu, row_softmax_vjp(z, dz, lam))


def em_m_step_vjp(f, z, dmu):
    zn = nx.l1_normalize_cols(z)
    df = nx.matmul(zn, dmu)
    dz = l1_normalize_cols_vjp(z, zn, nx.matmul_nt(f, dmu))
    return df, dz


def birw_closed_form_vjp(f, mu, z, w, out, dout):
    """Gradients of ``(1-w) solve(I - w^2 z N1(z)^T, w z mu + f)`` w.r.t. f, mu, z."""
    zn = nx.l1_normalize_cols(z)
    a = np.eye(f.shape[0]) - (w * w) * nx.matmul_nt(z, zn)
    x = out / (1 - w)
    db = nx.solve(np.ascontiguousarray(a.T), (1 - w) * dout)
    dr = (w * w) * nx.matmul_nt(db, x)
    dz = nx.matmul(dr, zn) + w * nx.matmul_nt(db, mu)
    dzn = nx.matmul_tn(dr, z)
    dz += l1_normalize_cols_vjp(z, zn, dzn)
    dmu = w * nx.matmul_tn(z, db)
    return db, dmu, dz


def birw_iterate_vjp(f, mu, z, w, t, dout):
    zn = nx.l1_normalize_cols(z)
    feats = [f]
    for _ in range(t):
        m = w * nx.matmul_tn(zn, feats[-1]) + (1 - w) * mu
        feats.append(w * nx.matmul(z, m) + (1 - w) * f)
    # replay means for the z gradient
    means = [w * nx.matmul_tn(zn, feats[k]) + (1 - w) * mu for k in range(t)]
    df = np.zeros_like(f)
    dmu = np.zeros_like(mu)
    dz = np.zeros_like(z)
    dzn = np.zeros_like(z)
    g = dout
    for k in range(t - 1, -1, -1):
        # feats[k+1] = w z means[k] + (1-w) f
        df += (1 - w) * g
        dz += w * nx.matmul_nt(g, means[k])
        dm = w * nx.matmul_tn(z, g)
        # means[k] = w zn^T feats[k] + (1-w) mu
        dmu += (1 - w) * dm
        dzn += w * nx.matmul_nt(feats[k], dm)
        g = w * nx.matmul(zn, dm)
    df += g
    dz += l1_normalize_cols_vjp(z, zn, dzn)
    return df, dmu, dz


def vanilla_rw_vjp(f, z_ff, w, out, dout):
    """Gradients of ``(1-w) solve(I - w z_ff, f)`` w.r.t. f and z_ff."""
    a = np.eye(f.shape[0]) - w * z_ff
    x = out / (1 - w)
    db = nx.solve(np.ascontiguousarray(a.T), (1 - w) * dout)
    return db, w * nx.matmul_nt(db, x)


def head_forward_vjp(f, params, out, d_ca_logits=None, d_mil_logits=None, d_s=None, d_lambda_f=None):
    """Backpropagate through ``head.forward``. Returns (df, dw_f, dw_a)."""
    k = params.attn_scale
    l, c1 = out.s_logits.shape
    d_s = np.zeros((l, c1)) if d_s is None else d_s.copy()
    d_lam = np.zeros(l) if d_lambda_f is None else d_lambda_f.copy()
    dw_a = np.zeros_like(params.w_a)
    df = np.zeros_like(f)

    if d_mil_logits is not None:
        lw, s = out.lambda_w, out.s_logits
        d_s += d_mil_logits[None, :] * lw
        d_s += col_softmax_vjp(lw, d_mil_logits[None, :] * s)
    if d_s.any():
        da, db = cosine_sim_vjp(f, params.w_a, k * d_s)
        df += da
        dw_a += db

    if d_ca_logits is not None:
        pooled = out.pooled[None, :]
        dpool, db = cosine_sim_vjp(pooled, params.w_a, k * d_ca_logits[None, :])
        dw_a += db
        lam = out.lambda_f
        total = lam.sum()
        dpool = dpool[0]
        df += np.outer(lam / total, dpool)
        d_lam += (f @ dpool - out.pooled @ dpool) / total

    dw_f = np.zeros_like(params.w_f)
    if d_lam.any():
        lam = out.lambda_f
        dcos = d_lam * lam * (1.0 - lam) * k
        da, db = cosine_sim_vjp(f, params.w_f, dcos[:, None])
        df += da
        dw_f += db
    return df, dw_f, dw_a


def loss_cls_grads(out, t_ca, t_mil, gamma):
    """Gradients of ``L_ca + gamma L_mil`` w.r.t. (ca_logits, mil_logits)."""
    return out.p_ca * t_ca.sum() - t_ca, gamma * (out.p_mil * t_mil.sum() - t_mil)


def loss_kd_grad_logits(tcam, target):
    """Gradient of the distillation loss w.r.t. the snippet logits feeding ``tcam``."""
    l = tcam.shape[0]
    return (tcam * target.sum(axis=1, keepdims=True) - target) / l


def loss_att_grad(lambda_f, k):
    lam = np.asarray(lambda_f)
    order = np.argsort(lam, kind="stable")
    g = np.zeros_like(lam)
    g[order[:k]] += 1.0 / k
    g[order[-k:]] -= 1.0 / k
    return g
