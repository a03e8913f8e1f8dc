"""Three-branch training: main, intra-video and inter-video, one shared head.

The main branch classifies the embedded snippet features ``F`` directly.
The intra-video branch classifies ``F`` after propagating the video's own
representative snippets into it; the inter-video branch does the same with
representatives retrieved from the memory bank for the video's labelled
classes. The two propagated TCAMs are fused into a frozen soft target that
supervises the main branch's TCAM.
"""
from dataclasses import asdict, dataclass, field, fields
import csv
import hashlib
import json
import os

import numpy as np

from snippetprop import backprop as bp
from snippetprop import head as hd
from snippetprop import numerics as nx
from snippetprop.datamodel import decode_matrix, encode_matrix, FormatError
from snippetprop.detect import DetectConfig, detect_video
from snippetprop.membank import BankEmpty, MemoryBank
from snippetprop.propagate import affinity, birw_closed_form, birw_iterate, vanilla_rw
from snippetprop.summarize import (
    em_e_step, em_m_step, farthest_point_seeds, lloyd, top_score_indices,
)

SUMMARIZERS = ("em_attention", "top_score", "kmeans", "features")
GRAD_MODES = ("analytic", "finite_difference")

# ablation ladder: which branches and supervision each variant trains with
VARIANTS = {
    "baseline": {"intra_branch": False, "alpha": 0.0, "memory_bank": False},
    "representative": {"intra_branch": True, "alpha": 0.0, "memory_bank": False},
    "pseudo_label": {"intra_branch": True, "memory_bank": False},
    "full": {"intra_branch": True, "memory_bank": True},
}


class NumericAbort(ArithmeticError):
    def __init__(self, video_id, value, reason="non-finite loss"):
        super().__init__(f"{reason} ({value!r}) on video {video_id!r}")
        self.video_id = video_id


@dataclass
class TrainConfig:
    epochs: int = 200
    bank_start_epoch: int = 100
    lr: float = 0.05
    w: float = 0.5
    lam: float = 5.0
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.2
    fusion_ae: float = 0.5
    grad_mode: str = "analytic"
    fd_step: float = 1e-4
    seed: int = 0
    embed_dim: int = 16
    num_reps: int = 8
    em_iterations: int = 2
    learn_init: bool = True
    bank_slots: int = 5
    attn_scale: float = 8.0
    k_ratio: float = 0.125
    summarizer: str = "em_attention"
    propagation: str = "closed_form"
    birw_iterations: int = 3
    intra_branch: bool = True
    memory_bank: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.bank_start_epoch <= self.epochs:
            raise ValueError("bank_start_epoch must lie in [0, epochs]")
        if not 0 <= self.fusion_ae <= 1:
            raise ValueError("fusion_ae must lie in [0, 1]")
        if not 0 <= self.w < 1:
            raise ValueError("w must lie in [0, 1)")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.summarizer not in SUMMARIZERS:
            raise ValueError(f"summarizer must be one of {SUMMARIZERS}")
        if self.propagation not in ("closed_form", "iterative", "vanilla_rw"):
            raise ValueError(f"unknown propagation {self.propagation!r}")

    @classmethod
    def for_variant(cls, variant, **overrides):
        return cls(**{**VARIANTS[variant], **overrides})


@dataclass
class ModelParams:
    embed: np.ndarray        # (d_in, d)
    head: hd.HeadParams
    mu0: np.ndarray          # (n, d)

    BLOCKS = ("embed", "w_f", "w_a", "mu0")

    @classmethod
    def init(cls, d_in, num_classes, cfg):
        rng = np.random.default_rng([cfg.seed, 7])
        embed = nx.semi_orthogonal_init(d_in, cfg.embed_dim, int(rng.integers(2**31)))
        head = hd.HeadParams.init(num_classes, cfg.embed_dim, rng, cfg.attn_scale)
        mu0 = nx.semi_orthogonal_init(cfg.num_reps, cfg.embed_dim, int(rng.integers(2**31)))
        return cls(embed, head, mu0)

    def blocks(self):
        return {"embed": self.embed, "w_f": self.head.w_f, "w_a": self.head.w_a, "mu0": self.mu0}

    def copy(self):
        return ModelParams(self.embed.copy(), self.head.copy(), self.mu0.copy())

    def to_vector(self):
        return np.concatenate([b.ravel() for b in self.blocks().values()])

    def from_vector(self, vec):
        out, pos = [], 0
        for b in self.blocks().values():
            out.append(vec[pos:pos + b.size].reshape(b.shape).copy())
            pos += b.size
        return ModelParams(out[0], hd.HeadParams(out[1], out[2], self.head.attn_scale), out[3])

    def digest(self):
        h = hashlib.sha256()
        for b in self.blocks().values():
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


@dataclass
class BranchOutputs:
    feats: np.ndarray
    main: hd.HeadOutput
    intra: object = None
    inter: object = None
    mu_a: object = None
    mu_e: object = None
    z_a: object = None
    z_e: object = None
    feats_a: object = None
    feats_e: object = None
    cache: dict = field(default_factory=dict, repr=False)

    def branches(self):
        return [o for o in (self.main, self.intra, self.inter) if o is not None]


# -- forward -----------------------------------------------------------------------

def _selection_scores(out):
    """Foreground-weighted best action probability per snippet (no labels needed)."""
    return out.lambda_f * out.tcam[:, :-1].max(axis=1)


def summarize_video(feats, params, cfg, main_out=None):
    """Representatives of one video under ``cfg.summarizer``; returns (mu, cache)."""
    if cfg.summarizer == "em_attention":
        mus, zs = [params.mu0], []
        for _ in range(cfg.em_iterations):
            z = em_e_step(feats, mus[-1], cfg.lam)
            zs.append(z)
            mus.append(em_m_step(feats, z))
        return mus[-1], {"mus": mus, "zs": zs}
    if cfg.summarizer == "top_score":
        if main_out is None:
            main_out = hd.forward(feats, params.head)
        idx = top_score_indices(_selection_scores(main_out), min(cfg.num_reps, len(feats)))
        return feats[idx].copy(), {"idx": idx}
    if cfg.summarizer == "kmeans":
        n = min(cfg.num_reps, len(feats))
        rng = np.random.default_rng([cfg.seed, 11])
        _, assign = lloyd(feats, farthest_point_seeds(feats, n, rng), 50)
        hard = np.zeros((len(feats), n))
        hard[np.arange(len(feats)), assign] = 1.0
        return em_m_step(feats, hard), {"hard": hard}
    return feats.copy(), {}


def _propagate(feats, mu, cfg):
    """Returns (propagated features, affinity)."""
    if cfg.propagation == "vanilla_rw":
        z = affinity(feats, feats, cfg.lam)
        return vanilla_rw(feats, z, cfg.w), z
    z = affinity(feats, mu, cfg.lam)
    if cfg.propagation == "iterative":
        return birw_iterate(feats, mu, z, cfg.w, cfg.birw_iterations), z
    return birw_closed_form(feats, mu, z, cfg.w), z


def _retrieve(bank, classes):
    if bank is None:
        return None
    try:
        return bank.retrieve(classes)
    except BankEmpty:
        return None


def forward_video(params, x, y, bank, use_bank, cfg):
    """All branches for one video. ``x`` is raw (l, d_in) features, ``y`` its label vector."""
    feats = nx.matmul(x, params.embed)
    main = hd.forward(feats, params.head)
    out = BranchOutputs(feats, main)
    if not cfg.intra_branch:
        return out
    mu_a, cache = summarize_video(feats, params, cfg, main)
    fa, za = _propagate(feats, mu_a, cfg)
    out.mu_a, out.z_a, out.feats_a = mu_a, za, fa
    out.intra = hd.forward(fa, params.head)
    out.cache["summary"] = cache
    if use_bank and y is not None:
        mu_e = _retrieve(bank, np.flatnonzero(y))
        if mu_e is not None:
            fe, ze = _propagate(feats, mu_e, cfg)
            out.mu_e, out.z_e, out.feats_e = mu_e, ze, fe
            out.inter = hd.forward(fe, params.head)
    return out


def fuse_pseudo(t_a, t_e, fusion_ae=0.5):
    if t_e is None:
        return np.array(t_a, copy=True)
    if t_a.shape != t_e.shape:
        raise ValueError(f"TCAM shapes differ: {t_a.shape} vs {t_e.shape}")
    return fusion_ae * t_a + (1 - fusion_ae) * t_e


def pseudo_target(out, cfg):
    """Frozen fused TCAM from the propagated branches, or None without an intra branch."""
    if out.intra is None:
        return None
    t_e = out.inter.tcam if out.inter is not None else None
    return fuse_pseudo(out.intra.tcam, t_e, cfg.fusion_ae)


def _loss_from_outputs(out, y, target, cfg):
    l_cls = sum(hd.loss_cls(o, y, cfg.gamma) for o in out.branches())
    l_kd = hd.loss_kd(out.main.tcam, target) if target is not None else 0.0
    l_att = hd.loss_att(out.main.lambda_f, cfg.k_ratio)
    return hd.loss_total(l_cls, l_kd, l_att, cfg.alpha, cfg.beta)


def video_loss(params, x, y, bank, epoch, cfg, target=None):
    """Total loss and its components for one video.

    ``target`` overrides the pseudo label; when None it is computed from this
    forward pass and treated as a constant.
    """
    use_bank = cfg.memory_bank and epoch >= cfg.bank_start_epoch
    out = forward_video(params, x, y, bank, use_bank, cfg)
    if target is None:
        target = pseudo_target(out, cfg)
    total, parts = _loss_from_outputs(out, y, target, cfg)
    return total, parts


# -- analytic gradient -----------------------------------------------------------

def _summary_vjp(feats, params, cfg, cache, dmu):
    """Gradient of the representatives w.r.t. (features, mu0)."""
    dfeats = np.zeros_like(feats)
    if cfg.summarizer == "em_attention":
        mus, zs = cache["mus"], cache["zs"]
        g = dmu
        for t in range(len(zs) - 1, -1, -1):
            df, dz = bp.em_m_step_vjp(feats, zs[t], g)
            dfeats += df
            df, g = bp.em_e_step_vjp(feats, mus[t], cfg.lam, zs[t], dz)
            dfeats += df
        return dfeats, g
    if cfg.summarizer == "top_score":
        np.add.at(dfeats, cache["idx"], dmu)
    elif cfg.summarizer == "kmeans":
        dfeats += bp.em_m_step_vjp(feats, cache["hard"], dmu)[0]
    else:
        dfeats += dmu
    return dfeats, np.zeros_like(params.mu0)


def _propagate_vjp(feats, mu, z, fout, dfout, cfg):
    """Gradient of propagated features w.r.t. (features, mu), including the affinity path."""
    if cfg.propagation == "vanilla_rw":
        df, dz = bp.vanilla_rw_vjp(feats, z, cfg.w, fout, dfout)
        da, db = bp.em_e_step_vjp(feats, feats, cfg.lam, z, dz)
        return df + da + db, np.zeros_like(mu)
    if cfg.propagation == "iterative":
        df, dmu, dz = bp.birw_iterate_vjp(feats, mu, z, cfg.w, cfg.birw_iterations, dfout)
    else:
        df, dmu, dz = bp.birw_closed_form_vjp(feats, mu, z, cfg.w, fout, dfout)
    da, db = bp.em_e_step_vjp(feats, mu, cfg.lam, z, dz)
    return df + da, dmu + db


def video_loss_and_grad(params, x, y, bank, epoch, cfg, target=None):
    """(total, components, gradient ModelParams, branch outputs) with the pseudo label frozen."""
    use_bank = cfg.memory_bank and epoch >= cfg.bank_start_epoch
    out = forward_video(params, x, y, bank, use_bank, cfg)
    if target is None:
        target = pseudo_target(out, cfg)
    total, parts = _loss_from_outputs(out, y, target, cfg)

    hp = params.head
    t_ca, t_mil = hd.extended_targets(y)
    dw_f = np.zeros_like(hp.w_f)
    dw_a = np.zeros_like(hp.w_a)

    def head_grad(feats, o, d_s=None, d_lam=None):
        d_ca, d_mil = bp.loss_cls_grads(o, t_ca, t_mil, cfg.gamma)
        df, gf, ga = bp.head_forward_vjp(feats, hp, o, d_ca, d_mil, d_s, d_lam)
        dw_f[...] += gf
        dw_a[...] += ga
        return df

    main = out.main
    d_s = cfg.alpha * bp.loss_kd_grad_logits(main.tcam, target) if target is not None and cfg.alpha else None
    k = hd.attention_k(len(main.lambda_f), cfg.k_ratio)
    d_lam = cfg.beta * bp.loss_att_grad(main.lambda_f, k) if cfg.beta else None
    dfeats = head_grad(out.feats, main, d_s, d_lam)
    dmu0 = np.zeros_like(params.mu0)

    if out.intra is not None:
        dfa = head_grad(out.feats_a, out.intra)
        df, dmu = _propagate_vjp(out.feats, out.mu_a, out.z_a, out.feats_a, dfa, cfg)
        dfeats += df
        df, dmu0 = _summary_vjp(out.feats, params, cfg, out.cache["summary"], dmu)
        dfeats += df
    if out.inter is not None:
        dfe = head_grad(out.feats_e, out.inter)
        df, _ = _propagate_vjp(out.feats, out.mu_e, out.z_e, out.feats_e, dfe, cfg)
        dfeats += df

    if not cfg.learn_init:
        dmu0 = np.zeros_like(dmu0)
    grad = ModelParams(nx.matmul_tn(x, dfeats), hd.HeadParams(dw_f, dw_a, hp.attn_scale), dmu0)
    return total, parts, grad, out


# -- finite differences ----------------------------------------------------------

def numeric_grad(fn, theta, step=1e-4, coords=None):
    """Central differences with per-coordinate step ``step * (1 + |theta_i|)``."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    idx = range(theta.size) if coords is None else coords
    for i in idx:
        h = step * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (fn(tp) - fn(tm)) / (2.0 * h)
    return g


def fd_video_grad(params, x, y, bank, epoch, cfg, target=None, coords=None):
    use_bank = cfg.memory_bank and epoch >= cfg.bank_start_epoch
    if target is None:
        # snapshot before any perturbation: the target never moves with the parameters
        target = pseudo_target(forward_video(params, x, y, bank, use_bank, cfg), cfg)
    frozen = target

    def fn(vec):
        return video_loss(params.from_vector(vec), x, y, bank, epoch, cfg, target=frozen)[0]

    vec = params.to_vector()
    g = numeric_grad(fn, vec, cfg.fd_step, coords)
    if not cfg.learn_init:
        g[-params.mu0.size:] = 0.0
    return params.from_vector(g), frozen


def grad_check(params, x, y, cfg, bank=None, epoch=0, coords=None, floor=1e-4):
    """Compare analytic and central-difference gradients.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    total, _, g_an, out = video_loss_and_grad(params, x, y, bank, epoch, cfg)
    target = pseudo_target(out, cfg)
    g_fd, _ = fd_video_grad(params, x, y, bank, epoch, cfg, target=target, coords=coords)
    a, n = g_an.to_vector(), g_fd.to_vector()
    idx = np.arange(a.size) if coords is None else np.asarray(coords)
    a, n = a[idx], n[idx]
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    worst = int(np.argmax(rel)) if len(rel) else -1
    return {
        "loss": total,
        "checked": int(len(idx)),
        "max_rel_err": float(rel.max()) if len(rel) else 0.0,
        "max_abs_err": float(np.abs(a - n).max()) if len(rel) else 0.0,
        "worst_coord": int(idx[worst]) if worst >= 0 else -1,
        "finite": bool(np.isfinite(a).all() and np.isfinite(n).all()),
    }


# -- training --------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "L_cls", "L_kd", "L_att", "total")


def _offer(bank, params, out, y):
    if out.mu_a is None:
        return
    probs = hd.score_snippets(out.mu_a, params.head)
    for k in np.flatnonzero(y):
        bank.offer(int(k), out.mu_a, probs[:, k])


def train(dataset, cfg, params=None, callback=None):
    """Per-video gradient descent; returns (params, bank, history rows)."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    d_in = dataset.features[0].snippets.shape[1]
    c = len(dataset.labels[0].y)
    params = ModelParams.init(d_in, c, cfg) if params is None else params.copy()
    bank = MemoryBank(c, cfg.embed_dim, cfg.bank_slots)
    rng = np.random.default_rng([cfg.seed, 2])
    videos = list(zip(dataset.features, dataset.labels))
    history = []
    for epoch in range(cfg.epochs):
        use_bank = cfg.memory_bank and epoch >= cfg.bank_start_epoch
        sums = dict.fromkeys(HISTORY_FIELDS[1:], 0.0)
        for vi in rng.permutation(len(videos)):
            feat, label = videos[vi]
            x, y = feat.snippets, label.y
            if cfg.grad_mode == "analytic":
                total, parts, grad, _ = video_loss_and_grad(params, x, y, bank, epoch, cfg)
            else:
                grad, target = fd_video_grad(params, x, y, bank, epoch, cfg)
                total, parts = video_loss(params, x, y, bank, epoch, cfg, target=target)
            if not np.isfinite(total):
                raise NumericAbort(feat.video_id, total)
            for key in sums:
                sums[key] += parts[key]
            if cfg.lr:
                vec = params.to_vector() - cfg.lr * grad.to_vector()
                if not np.isfinite(vec).all() or np.abs(vec).max() > np.finfo(np.float32).max:
                    raise NumericAbort(feat.video_id, total, "parameters left the float32 range")
                params = params.from_vector(vec)
            if use_bank:
                after = forward_video(params, x, y, None, False, cfg)
                _offer(bank, params, after, y)
        row = {"epoch": epoch + 1, **{k: v / len(videos) for k, v in sums.items()}}
        history.append(row)
        if callback is not None:
            callback(row)
    return params, bank, history


def infer_video(params, x, cfg):
    """Main and intra-video head outputs; the inter-video branch is not used at test time."""
    out = forward_video(params, x, None, None, False, cfg)
    return out.main, out.intra


def detect_dataset(params, dataset, cfg, dcfg=None, threads=1):
    dcfg = dcfg or DetectConfig()

    def one(f):
        main, intra = infer_video(params, f.snippets, cfg)
        return f.video_id, detect_video(main, intra, dcfg, f.snippet_duration_s)

    if threads > 1 and len(dataset) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, dataset.features))
    else:
        results = [one(f) for f in dataset.features]
    return dict(results)


# -- checkpoints and history --------------------------------------------------------

def save_checkpoint(path, params, bank, cfg, extra=None):
    """Directory checkpoint: manifest.json + one SNPF file per parameter block + bank."""
    os.makedirs(path, exist_ok=True)
    files = {}
    for name, block in params.blocks().items():
        fn = f"{name}.snpf"
        with open(os.path.join(path, fn), "wb") as fh:
            fh.write(encode_matrix(block))
        files[name] = fn
    bank.save(os.path.join(path, "bank.json"), os.path.join(path, "bank.snpf"))
    manifest = {
        "format": "snippetprop-checkpoint",
        "version": 1,
        "params": files,
        "shapes": {k: list(v.shape) for k, v in params.blocks().items()},
        "attn_scale": params.head.attn_scale,
        "bank": {"header": "bank.json", "payload": "bank.snpf"},
        "train_config": asdict(cfg),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (params, bank, TrainConfig, manifest)."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "snippetprop-checkpoint":
        raise FormatError(f"{path} is not a snippetprop checkpoint")
    blocks = {}
    for name in ModelParams.BLOCKS:
        with open(os.path.join(path, manifest["params"][name]), "rb") as fh:
            blocks[name], _ = decode_matrix(fh.read())
        if list(blocks[name].shape) != manifest["shapes"][name]:
            raise FormatError(f"{name}: payload shape {blocks[name].shape} disagrees with manifest")
    params = ModelParams(
        blocks["embed"], hd.HeadParams(blocks["w_f"], blocks["w_a"], manifest["attn_scale"]), blocks["mu0"])
    bank = MemoryBank.load(os.path.join(path, manifest["bank"]["header"]),
                           os.path.join(path, manifest["bank"]["payload"]))
    known = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in manifest["train_config"].items() if k in known})
    return params, bank, cfg, manifest


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
