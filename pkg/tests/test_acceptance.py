"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

from snippetprop import head as hd
from snippetprop import numerics as nx
from snippetprop.cli import main as cli_main
from snippetprop.datamodel import SynthConfig, generate_synthetic, snippet_classes
from snippetprop.detect import fuse_test_outputs, temporal_nms
from snippetprop.evaluation import average_precision, map_report
from snippetprop.membank import MemoryBank
from snippetprop.pipeline import (
    ModelParams, TrainConfig, detect_dataset, grad_check, numeric_grad, summarize_video, train,
)
from snippetprop.propagate import (
    affinity, birw_closed_form, birw_iterate, random_instance, transition, vanilla_rw,
)
from snippetprop.summarize import em_e_step, em_m_step, representativeness_counts, DEFAULT_THRESHOLDS
from tests.acceptance_log import record
from tests.test_detect import nms_reference, random_instances
from tests.test_evaluation import ap_prefix_oracle, random_case
from tests.test_membank import TopSOracle
from tests.test_propagate import in_hull_bruteforce, symmetric_doubly_stochastic

# fixed synthetic benchmark for the ablation and representativeness checks
BENCH_SYNTH = dict(num_classes=4, feature_dim=16, num_videos=100, noise_sigma=0.2, background_sigma=0.25,
                   nonnegative_prototypes=True, scene_strength=1.0, scene_pool=4)
BENCH_TRAIN = dict(embed_dim=16, epochs=200, bank_start_epoch=100, lr=0.01, alpha=0.25)
BENCH_SEEDS = range(5)
N_TRAIN = 60
LADDER = ("baseline", "pseudo_label", "full")


def birw_instances(count=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        l, n = int(rng.integers(8, 65)), int(rng.integers(2, 9))
        w = float(rng.choice(np.arange(1, 10) / 10))
        f, mu, z = random_instance(rng, l, n, int(rng.integers(2, 17)))
        yield f, mu, z, w


def test_criterion_01_birw_equivalence():
    start = time.perf_counter()
    worst = max(np.abs(birw_iterate(f, mu, z, w, 100) - birw_closed_form(f, mu, z, w)).max()
                for f, mu, z, w in birw_instances())
    dt = time.perf_counter() - start
    ok = worst < 1e-6 and dt < 10
    record(1, ok, f"max |iterate(100) - closed form| = {worst:.2e} over 100 instances in {dt:.2f}s")
    assert ok


def test_criterion_02_geometric_decay():
    worst_margin, fits = -np.inf, 0
    for f, mu, z, w in birw_instances(seed=1):
        ref = birw_closed_form(f, mu, z, w)
        scale = np.abs(ref).max()
        ts, errs = [], []
        for t in range(1, 41):
            e = np.abs(birw_iterate(f, mu, z, w, t) - ref).max()
            # below ~1e3 ulp the error is rounding noise, not the iteration
            if e <= 1e3 * np.finfo(float).eps * scale:
                break
            ts.append(t)
            errs.append(e)
        if len(ts) < 2:
            continue
        slope = np.polyfit(ts, np.log(errs), 1)[0]
        worst_margin = max(worst_margin, slope - np.log(w * w))
        fits += 1
    ok = fits > 0 and worst_margin <= 0.05
    record(2, ok, f"max (slope - log w^2) = {worst_margin:+.4f} over {fits} fitted instances (limit +0.05)")
    assert ok


def test_criterion_03_degenerate_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        l = int(rng.integers(4, 40))
        z = symmetric_doubly_stochastic(rng, l, int(rng.integers(1, 6)))
        f = rng.standard_normal((l, int(rng.integers(1, 9))))
        w = float(rng.uniform(0.05, 0.95))
        expect = (1 - w) * np.linalg.solve(np.eye(l) - w * z, f)
        worst = max(worst, np.abs(birw_closed_form(f, f, z, w) - expect).max(),
                    np.abs(vanilla_rw(f, z, w) - expect).max())
    ok = worst < 1e-8
    record(3, ok, f"max deviation from (1-w)(I-wZ)^-1 F = {worst:.2e} over 50 matrices")
    assert ok


def test_criterion_04_stochasticity():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        l, n, d, c = (int(rng.integers(1, 40)), int(rng.integers(1, 9)),
                      int(rng.integers(1, 17)), int(rng.integers(1, 6)))
        f = rng.standard_normal((l, d)) * rng.uniform(0.01, 100)
        mu = rng.standard_normal((n, d))
        params = hd.HeadParams.init(c, d, rng, float(rng.uniform(1, 20)))
        a = hd.forward(f, params)
        b = hd.forward(f + rng.standard_normal((l, d)), params)
        fused = fuse_test_outputs(a, b, float(rng.random()))
        z = em_e_step(f, mu, float(rng.uniform(0.1, 20)))
        worst = max(worst,
                    np.abs(z.sum(axis=1) - 1).max(),
                    np.abs(a.tcam.sum(axis=1) - 1).max(),
                    np.abs(fused.tcam.sum(axis=1) - 1).max(),
                    abs(a.p_ca.sum() - 1), abs(a.p_mil.sum() - 1))
        if (z.sum(axis=0) > 0).all():
            worst = max(worst, np.abs(transition(z).sum(axis=1) - 1).max())
    ok = worst < 1e-9
    record(4, ok, f"max |row sum - 1| = {worst:.2e} over 1000 inputs")
    assert ok


def test_criterion_05_convex_hull():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        l, n, d = int(rng.integers(2, 40)), int(rng.integers(1, 9)), int(rng.integers(1, 10))
        f = rng.standard_normal((l, d))
        mu = em_m_step(f, em_e_step(f, rng.standard_normal((n, d)), 5.0))
        out = birw_closed_form(f, mu, affinity(f, mu, 5.0), float(rng.uniform(0, 0.95)))
        for m in (mu, out):
            worst = max(worst, (f.min(axis=0) - m).max(), (m - f.max(axis=0)).max())
    hull_ok = 0
    for i in range(20):
        d = 1 + i % 3
        f = rng.standard_normal((int(rng.integers(d + 1, 9)), d))
        mu = em_m_step(f, em_e_step(f, rng.standard_normal((3, d)), 5.0))
        out = birw_closed_form(f, mu, affinity(f, mu, 5.0), 0.5)
        hull_ok += all(in_hull_bruteforce(r, f) for r in np.vstack([mu, out]))
    ok = worst <= 1e-9 and hull_ok == 20
    record(5, ok, f"max envelope violation {max(worst, 0.0):.2e}; hull membership {hull_ok}/20")
    assert ok


def test_criterion_06_memory_bank_oracle():
    rng = np.random.default_rng(6)
    classes, slots, d = 3, 5, 4
    bank = MemoryBank(classes, d, slots)
    oracles = [TopSOracle(slots) for _ in range(classes)]
    counter = 0
    for k in range(classes):
        for _ in range(1000):
            m = int(rng.integers(1, 4))
            rows = np.column_stack([np.arange(counter, counter + m), rng.standard_normal((m, d - 1))])
            counter += m
            scores = np.round(rng.random(m), 2)
            bank.offer(k, rows, scores)
            oracles[k].offer(rows, scores)
    mismatches = 0
    for k in range(classes):
        feats, scores = bank.entries(k)
        want_s, want_f = oracles[k].top()
        mismatches += scores.tolist() != want_s or [tuple(r) for r in feats] != want_f
    ok = mismatches == 0
    record(6, ok, f"{classes} classes x 1000 offers; {mismatches} classes disagree with the top-s oracle")
    assert ok


def test_criterion_07_ap_and_nms_oracles():
    rng = np.random.default_rng(7)
    ap_bad = 0
    for _ in range(500):
        dets, gts = random_case(rng)
        thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        ap_bad += abs(average_precision(dets, gts, thr) - float(ap_prefix_oracle(dets, gts, thr))) > 1e-12
    nms_bad = 0
    for _ in range(500):
        inst = random_instances(rng, int(rng.integers(0, 20)))
        nms_bad += temporal_nms(inst, 0.5) != nms_reference(inst, 0.5)
    ok = ap_bad == 0 and nms_bad == 0
    record(7, ok, f"AP mismatches {ap_bad}/500, NMS mismatches {nms_bad}/500")
    assert ok


def test_criterion_08_gradient_sanity():
    ds = generate_synthetic(SynthConfig(num_classes=2, feature_dim=4, num_videos=2, snippets_per_video=(8, 10),
                                        actions_per_video=(1, 1), action_length=(2, 3), seed=8))
    cfg = TrainConfig(embed_dim=3, num_reps=2, epochs=1, bank_start_epoch=0, bank_slots=2, seed=8)
    params = ModelParams.init(4, 2, cfg)
    _, bank, _ = train(ds, cfg, params)
    worst = max(grad_check(params, f.snippets, y.y, cfg, bank=bank, epoch=1)["max_rel_err"]
                for f, y in zip(ds.features, ds.labels))
    theta_star = np.array([0.7, -1.3, 0.25, 2.0])
    curv = np.array([1.0, 2.0, 0.5, 3.0])
    loss = lambda t: 0.5 * (curv * (t - theta_star) ** 2).sum()
    theta = np.zeros(4)
    for _ in range(200):
        theta = theta - 0.3 * numeric_grad(loss, theta)
    recov = np.abs(theta - theta_star).max()
    ok = worst < 1e-3 and recov < 1e-6
    record(8, ok, f"analytic vs central differences max rel err {worst:.2e}; quadratic recovery err {recov:.2e}")
    assert ok


# -- synthetic benchmark ----------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    """Train every ladder variant on every seed once; returns per-seed results."""
    start = time.perf_counter()
    results = []
    for seed in BENCH_SEEDS:
        ds = generate_synthetic(SynthConfig(seed=seed, **BENCH_SYNTH))
        ids = [f.video_id for f in ds.features]
        tr, te = ds.subset(ids[:N_TRAIN]), ds.subset(ids[N_TRAIN:])
        row = {"test": te, "params": {}, "cfg": {}, "map": {}}
        for variant in LADDER:
            cfg = TrainConfig.for_variant(variant, seed=seed, **BENCH_TRAIN)
            params, _, _ = train(tr, cfg)
            rep = map_report(detect_dataset(params, te, cfg), te.segments, num_classes=BENCH_SYNTH["num_classes"])
            row["params"][variant], row["cfg"][variant] = params, cfg
            row["map"][variant] = rep.bands["0.1:0.5"]
        results.append(row)
    return results, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_09_ablation_ordering(benchmark):
    results, dt = benchmark
    maps = [[r["map"][v] for v in LADDER] for r in results]
    ordered = sum(full >= pl >= base for base, pl, full in maps)
    beats = sum(full > base for base, _, full in maps)
    mean = np.mean(maps, axis=0)
    detail = " ".join(f"[{b:.3f} {p:.3f} {f:.3f}]" for b, p, f in maps)
    ok = ordered >= 4 and beats == len(maps) and dt < 15 * 60
    record(9, ok, f"ordered {ordered}/5, full>baseline {beats}/5, mean mAP@0.1:0.5 "
                  f"base {mean[0]:.3f} pl {mean[1]:.3f} full {mean[2]:.3f}, {dt:.0f}s; per seed {detail}")
    assert ok


def strategy_profile(params, cfg, dataset, summarizer):
    sub = TrainConfig(**{**cfg.__dict__, "summarizer": summarizer})
    rows = []
    for f in dataset.features:
        feats = nx.matmul(f.snippets, params.embed)
        mu, _ = summarize_video(feats, params, sub)
        lab = snippet_classes(dataset, f.video_id, f.length, f.snippet_duration_s)
        rows.append(representativeness_counts(feats, mu, lab))
    rows = np.vstack(rows)
    return rows.mean(axis=0) if len(rows) else np.full(len(DEFAULT_THRESHOLDS), np.nan)


@pytest.mark.slow
def test_criterion_10_representativeness(benchmark):
    results, _ = benchmark
    wins, gaps = 0, []
    for r in results:
        params, cfg = r["params"]["full"], r["cfg"]["full"]
        em = strategy_profile(params, cfg, r["test"], "em_attention")
        top = strategy_profile(params, cfg, r["test"], "top_score")
        wins += bool((em >= top).all())
        gaps.append(float(np.min(em - top)))
    ok = wins >= 4
    record(10, ok, f"em_attention dominates top_score in {wins}/5 seeds; min gap per seed "
                   + " ".join(f"{g:+.3f}" for g in gaps))
    assert ok


def test_criterion_11_determinism(tmp_path):
    run = {
        "seed": 11,
        "synth": {"num_classes": 3, "feature_dim": 6, "num_videos": 6, "snippets_per_video": [12, 16]},
        "train": {"variant": "full", "epochs": 4, "bank_start_epoch": 2, "embed_dim": 6, "num_reps": 3},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(run))
    outputs = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        assert cli_main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
        assert cli_main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "ckpt")]) == 0
        assert cli_main(["infer", "--ckpt", str(root / "ckpt"), "--data", str(root / "data"),
                         "--out", str(root / "dets.json")]) == 0
        assert cli_main(["eval", "--detections", str(root / "dets.json"),
                         "--annotations", str(root / "data" / "annotations.json"), "--out", str(root / "report")]) == 0
        outputs.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    differ = sorted(k for k in outputs[0] if outputs[0][k] != outputs[1].get(k))
    ok = not differ and outputs[0].keys() == outputs[1].keys()
    record(11, ok, f"{len(outputs[0])} artifacts from synth/train/infer/eval; differing: {differ or 'none'}")
    assert ok
