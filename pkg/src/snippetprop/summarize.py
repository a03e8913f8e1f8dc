"""Representative snippets: EM attention plus the top-score and k-means baselines.

EM attention fits an isotropic Gaussian mixture to one video's snippet
features. The E step is a temperature-scaled softmax over cosine similarities
between snippets and means; the M step replaces each mean by the
responsibility-weighted average of the snippets. A small fixed number of
rounds is run from an initial set of means, which is either a fixed
semi-orthogonal matrix or a trained parameter.
"""
from dataclasses import dataclass

import numpy as np

from snippetprop import numerics as nx

STRATEGIES = ("em_attention", "top_score", "kmeans")
DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass
class EmConfig:
    n: int = 8
    lam: float = 5.0
    iterations: int = 2
    learn_init: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("EmConfig.n must be >= 1")
        if not self.lam > 0:
            raise ValueError("EmConfig.lam must be > 0")
        if self.iterations < 1:
            raise ValueError("EmConfig.iterations must be >= 1")


@dataclass
class RepresentativeSet:
    mu: np.ndarray
    z: np.ndarray
    strategy: str

    @property
    def n(self):
        return self.mu.shape[0]


def _mat(f):
    return f.snippets if hasattr(f, "snippets") else nx.as_mat(f, "features")


def em_e_step(f, mu, lam):
    """Responsibilities ``softmax(lam * N2(f) N2(mu)^T)`` row-wise, shape (l, n)."""
    if f.shape[1] != mu.shape[1]:
        raise nx.MatrixError(f"em_e_step: feature dims differ ({f.shape[1]} vs {mu.shape[1]})")
    sim = nx.matmul_nt(nx.l2_normalize_rows(f), nx.l2_normalize_rows(mu))
    return nx.row_softmax(sim, lam)


def em_m_step(f, z):
    """New means ``N1(z)^T f``; a component with zero mass yields a zero row."""
    if z.shape[0] != f.shape[0]:
        raise nx.MatrixError(f"em_m_step: z has {z.shape[0]} rows, f has {f.shape[0]}")
    return nx.matmul_tn(nx.l1_normalize_cols(z), f)


def summarize_em(f, cfg, mu0):
    f = _mat(f)
    mu0 = nx.as_mat(mu0, "mu0")
    if mu0.shape[1] != f.shape[1]:
        raise nx.MatrixError(f"summarize_em: mu0 is {mu0.shape}, features are {f.shape}")
    mu = mu0
    for _ in range(cfg.iterations):
        z = em_e_step(f, mu, cfg.lam)
        mu = em_m_step(f, z)
    # final affinity is recomputed against the returned means
    return RepresentativeSet(mu, em_e_step(f, mu, cfg.lam), "em_attention")


def top_score_indices(scores, n):
    scores = np.asarray(scores, dtype=np.float64)
    if n > len(scores):
        raise ValueError(f"cannot select {n} snippets out of {len(scores)}")
    # stable sort on -score: ties keep the lower index first
    return np.argsort(-scores, kind="stable")[:n]


def summarize_top_score(f, scores, n, lam=5.0):
    """The ``n`` highest-scoring snippets themselves, used as means."""
    f = _mat(f)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (f.shape[0],):
        raise ValueError(f"expected {f.shape[0]} scores, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    mu = f[top_score_indices(scores, n)].copy()
    return RepresentativeSet(mu, em_e_step(f, mu, lam), "top_score")


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def farthest_point_seeds(x, n, rng):
    """First seed uniformly at random, then repeatedly the point farthest from all seeds."""
    idx = [int(rng.integers(len(x)))]
    d = _sq_dists(x, x[idx])[:, 0]
    while len(idx) < n:
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[idx].copy()


def lloyd(x, centers, iters):
    centers = centers.copy()
    assign = None
    for _ in range(iters):
        new = np.argmin(_sq_dists(x, centers), axis=1)
        for k in range(len(centers)):
            if (new == k).any():
                continue
            # re-seed at the farthest point not alone in its cluster; n <= l guarantees one
            d = _sq_dists(x, centers)[np.arange(len(x)), new]
            counts = np.bincount(new, minlength=len(centers))
            d[counts[new] <= 1] = -1.0
            far = int(np.argmax(d))
            centers[k] = x[far]
            new[far] = k
        for k in range(len(centers)):
            centers[k] = x[new == k].mean(axis=0)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
    assign = np.argmin(_sq_dists(x, centers), axis=1)
    return centers, assign


def sse(x, centers, assign):
    return float(((x - centers[assign]) ** 2).sum())


def summarize_kmeans(f, n, iters=50, seed=0):
    f = _mat(f)
    if not 1 <= n <= f.shape[0]:
        raise ValueError(f"kmeans needs 1 <= n <= l, got n={n}, l={f.shape[0]}")
    rng = np.random.default_rng(seed)
    centers, assign = lloyd(f, farthest_point_seeds(f, n, rng), iters)
    z = np.zeros((f.shape[0], n))
    z[np.arange(f.shape[0]), assign] = 1.0
    return RepresentativeSet(centers, z, "kmeans")


def nearest_snippet_labels(f, mu, snippet_class):
    sim = nx.cosine_sim(mu, f)
    return np.asarray(snippet_class)[np.argmax(sim, axis=1)]


def representativeness_counts(f, mu, snippet_class, thresholds=DEFAULT_THRESHOLDS, ignore=(-1,)):
    """Per-representative proportions as a (kept_reps, len(thresholds)) array.

    Each representative takes the label of its most similar snippet. Its
    proportion at threshold t is the share of that class's snippets whose
    cosine similarity to it exceeds t. Representatives labelled with a class
    in ``ignore`` (background by default) are dropped.
    """
    f = _mat(f)
    snippet_class = np.asarray(snippet_class)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    sim = nx.cosine_sim(mu, f)
    labels = snippet_class[np.argmax(sim, axis=1)]
    rows = []
    for k, lab in enumerate(labels):
        if lab in ignore:
            continue
        same = snippet_class == lab
        s = sim[k, same]
        rows.append((s[:, None] > thresholds[None, :]).mean(axis=0))
    return np.array(rows).reshape(-1, len(thresholds))


def representativeness_profile(f, mu, snippet_class, thresholds=DEFAULT_THRESHOLDS, ignore=(-1,)):
    """Mean proportion over representatives at each threshold.

    Returns ``(thresholds, proportions)``; proportions are NaN when every
    representative was ignored.
    """
    per_rep = representativeness_counts(f, mu, snippet_class, thresholds, ignore)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(per_rep) == 0:
        return thresholds, np.full(len(thresholds), np.nan)
    return thresholds, per_rep.mean(axis=0)
