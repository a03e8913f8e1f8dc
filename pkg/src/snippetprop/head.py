"""Shared classification head: class-agnostic attention branch plus MIL branch.

Both branches score snippets by scaled cosine similarity against learned
classifier rows. The attention branch pools features with sigmoid
foreground weights and classifies the pooled vector; the MIL branch builds
snippet logits ``S`` (l x (c+1), last column background), turns them into a
TCAM by softmax over classes, and pools them over time with per-class
temporal softmax weights.
"""
from dataclasses import dataclass

import numpy as np

from snippetprop import numerics as nx

LOG_EPS = 1e-12


@dataclass
class HeadParams:
    w_f: np.ndarray  # (1, d)
    w_a: np.ndarray  # (c + 1, d), last row is background
    attn_scale: float = 8.0

    @property
    def num_classes(self):
        return self.w_a.shape[0] - 1

    @property
    def dim(self):
        return self.w_a.shape[1]

    @classmethod
    def init(cls, num_classes, dim, rng, attn_scale=8.0):
        return cls(
            rng.standard_normal((1, dim)) / np.sqrt(dim),
            rng.standard_normal((num_classes + 1, dim)) / np.sqrt(dim),
            attn_scale,
        )

    def copy(self):
        return HeadParams(self.w_f.copy(), self.w_a.copy(), self.attn_scale)


@dataclass
class HeadOutput:
    lambda_f: np.ndarray   # (l,)
    s_logits: np.ndarray   # (l, c+1)
    tcam: np.ndarray       # (l, c+1), rows sum to 1
    lambda_w: np.ndarray   # (l, c+1), columns sum to 1
    p_ca: np.ndarray       # (c+1,)
    p_mil: np.ndarray      # (c+1,)
    ca_logits: np.ndarray
    mil_logits: np.ndarray
    pooled: np.ndarray     # attention-pooled video feature (d,)
    fg_cos: np.ndarray     # cosine to w_f per snippet (l,)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v):
    s = v - v.max()
    return s - np.log(np.exp(s).sum())


def forward(f, params):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != params.dim:
        raise nx.MatrixError(f"head.forward: features {f.shape} vs classifier dim {params.dim}")
    k = params.attn_scale
    fg_cos = nx.cosine_sim(f, params.w_f)[:, 0]
    lambda_f = sigmoid(k * fg_cos)
    pooled = (lambda_f @ f) / lambda_f.sum()
    ca_logits = k * nx.cosine_sim(pooled[None, :], params.w_a)[0]
    s = k * nx.cosine_sim(f, params.w_a)
    tcam = nx.row_softmax(s)
    lambda_w = nx.col_softmax(s)
    mil_logits = (lambda_w * s).sum(axis=0)
    return HeadOutput(lambda_f, s, tcam, lambda_w, softmax(ca_logits), softmax(mil_logits),
                      ca_logits, mil_logits, pooled, fg_cos)


def score_snippets(rows, params):
    """Class probabilities (m x (c+1)) for arbitrary feature rows."""
    return nx.row_softmax(nx.cosine_sim(rows, params.w_a), params.attn_scale)


def extended_targets(y):
    """L1-normalised targets ``[y, 0]`` for the CA branch and ``[y, 1]`` for MIL."""
    y = np.asarray(y, dtype=np.float64)
    ca = np.append(y, 0.0)
    mil = np.append(y, 1.0)
    if ca.sum() == 0:
        raise ValueError("video label has no active class")
    return ca / ca.sum(), mil / mil.sum()


def loss_cls(out, y, gamma=0.2):
    """``L_ca + gamma * L_mil`` (cross-entropies against the extended targets)."""
    y = y.y if hasattr(y, "y") else y
    t_ca, t_mil = extended_targets(y)
    l_ca = -float(t_ca @ log_softmax(out.ca_logits))
    l_mil = -float(t_mil @ log_softmax(out.mil_logits))
    return l_ca + gamma * l_mil


def loss_kd(t_main, t_fused):
    """Mean over snippets of ``-sum_k t_fused log t_main``."""
    t_main = np.asarray(t_main)
    t_fused = np.asarray(t_fused)
    if t_main.shape != t_fused.shape:
        raise ValueError(f"TCAM shapes differ: {t_main.shape} vs {t_fused.shape}")
    return float(-(t_fused * np.log(np.maximum(t_main, LOG_EPS))).sum() / t_main.shape[0])


def attention_k(length, k_ratio=0.125):
    return max(1, int(np.floor(k_ratio * length)))


def loss_att(lambda_f, k_ratio=0.125):
    """Mean of the k lowest attentions plus mean shortfall of the k highest from 1.

    Zero for a perfectly bimodal 0/1 profile, 1 for a flat 0.5 profile.
    """
    lam = np.asarray(lambda_f, dtype=np.float64)
    if lam.size == 0:
        raise ValueError("empty attention vector")
    k = attention_k(len(lam), k_ratio)
    srt = np.sort(lam)
    return float(srt[:k].sum() / k + (1.0 - srt[-k:]).sum() / k)


def loss_total(l_cls, l_kd, l_att, alpha=1.0, beta=0.1):
    """Weighted sum; returns (total, components dict)."""
    parts = {"L_cls": float(l_cls), "L_kd": float(l_kd), "L_att": float(l_att)}
    total = parts["L_cls"] + alpha * parts["L_kd"] + beta * parts["L_att"]
    parts["total"] = total
    return total, parts
