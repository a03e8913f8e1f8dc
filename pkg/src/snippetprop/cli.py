"""Command-line entry point: synth, train, infer, eval, bench-birw, bench-kernels, analyze."""
import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields

import jsonschema
import numpy as np

from snippetprop import __version__
from snippetprop import numerics as nx
from snippetprop._errors import SingularMatrixError
from snippetprop.datamodel import (
    FormatError, SynthConfig, encode_matrix, generate_synthetic, load_dataset, read_annotations,
    save_dataset, snippet_classes,
)
from snippetprop.detect import DETECTIONS_SCHEMA, DetectConfig, read_detections, write_detections
from snippetprop.evaluation import DEFAULT_BANDS, DEFAULT_TIOUS, map_report
from snippetprop.pipeline import (
    VARIANTS, ModelParams, NumericAbort, TrainConfig, detect_dataset, load_checkpoint, save_checkpoint,
    summarize_video, train, write_history,
)
from snippetprop.propagate import BENCH_FIELDS, bench_birw
from snippetprop.summarize import DEFAULT_THRESHOLDS, representativeness_counts

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PROFILE_STRATEGIES = ("em_attention", "em_attention_fixed_init", "top_score", "kmeans")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- run config ------------------------------------------------------------------

def _json_type(value):
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, (tuple, list)):
        return {"type": "array", "items": {"type": "number"}}
    raise TypeError(f"no JSON type for {value!r}")


def _section_schema(cls, extra=None):
    """Object schema whose properties are the dataclass fields (seed excluded)."""
    default = cls()
    props = {f.name: _json_type(getattr(default, f.name)) for f in fields(cls) if f.name != "seed"}
    props.update(extra or {})
    return {"type": "object", "additionalProperties": False, "properties": props}


RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "synth", "train"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "synth": _section_schema(SynthConfig),
        "train": _section_schema(TrainConfig, {"variant": {"enum": sorted(VARIANTS)}}),
        "detect": _section_schema(DetectConfig),
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tious": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
                "bands": {
                    "type": "object",
                    "additionalProperties": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
                },
            },
        },
    },
}


def _schema_message(err):
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        return f"missing required key {missing[0]!r} in {where}"
    if err.validator == "additionalProperties":
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        unknown = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        return f"unknown key {unknown[0]!r} in {where}" if unknown else err.message
    where = "/".join(str(p) for p in err.absolute_path)
    return f"{where}: {err.message}"


def validate_run_config(doc):
    """Raise UsageError with a readable message when ``doc`` violates the schema."""
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.validator))
    if errors:
        raise UsageError("config: " + _schema_message(errors[0]))


def load_run_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    validate_run_config(doc)
    return doc


def _build(cls, section, seed=None, **extra):
    kw = dict(section)
    if seed is not None:
        kw["seed"] = seed
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"config: {cls.__name__}: {e}") from e


def synth_config(doc):
    return _build(SynthConfig, doc["synth"], doc["seed"])


def train_config(doc):
    section = dict(doc["train"])
    variant = section.pop("variant", None)
    base = dict(VARIANTS[variant]) if variant else {}
    base.update(section)
    return _build(TrainConfig, base, doc["seed"])


def detect_config(doc):
    return _build(DetectConfig, doc.get("detect", {}))


def eval_settings(doc):
    ev = (doc or {}).get("eval", {})
    tious = tuple(ev.get("tious", DEFAULT_TIOUS))
    bands = {k: tuple(v) for k, v in ev.get("bands", DEFAULT_BANDS).items()}
    return tious, bands


# -- helpers -----------------------------------------------------------------------

def build_hash():
    """Digest of the package sources; identifies the build in ``--version``."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        if name.endswith((".py", ".pyx")):
            h.update(name.encode())
            with open(os.path.join(root, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()[:12]


def thread_count():
    raw = os.environ.get("SNIPPETPROP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SNIPPETPROP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SNIPPETPROP_THREADS must be >= 1")
    return min(n, os.cpu_count() or 1)


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot load dataset from {path}: {e}") from e


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot load checkpoint from {path}: {e}") from e


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _check_compatible(params, dataset):
    d_in = params.embed.shape[0]
    c = params.head.num_classes
    for f in dataset.features:
        if f.snippets.shape[1] != d_in:
            raise DataError(f"{f.video_id}: feature dim {f.snippets.shape[1]} but checkpoint expects {d_in}")
    if dataset.class_names and len(dataset.class_names) != c:
        raise DataError(f"dataset has {len(dataset.class_names)} classes but checkpoint has {c}")


# -- commands ------------------------------------------------------------------------

def cmd_synth(args):
    doc = load_run_config(args.config)
    ds = generate_synthetic(synth_config(doc))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} videos to {args.out}")


def cmd_train(args):
    doc = load_run_config(args.config)
    cfg = train_config(doc)
    ds = _load_data(args.data)
    if len(ds) == 0:
        raise DataError("training set is empty")
    d_in = ds.features[0].snippets.shape[1]
    c = len(ds.labels[0].y)
    params = ModelParams.init(d_in, c, cfg)
    params, bank, history = train(ds, cfg, params)
    save_checkpoint(args.out, params, bank, cfg, {"classes": list(ds.class_names)})
    write_history(history, os.path.join(args.out, "history.csv"))
    print(f"trained {cfg.epochs} epochs on {len(ds)} videos; checkpoint in {args.out}")


def cmd_infer(args):
    params, _, cfg, _ = _load_ckpt(args.ckpt)
    dcfg = detect_config(load_run_config(args.config)) if args.config else DetectConfig()
    ds = _load_data(args.data)
    _check_compatible(params, ds)
    dets = detect_dataset(params, ds, cfg, dcfg, threads=thread_count())
    write_detections(dets, args.out)
    print(f"wrote detections for {len(dets)} videos to {args.out}")


def cmd_eval(args):
    tious, bands = eval_settings(load_run_config(args.config) if args.config else None)
    try:
        with open(args.detections) as fh:
            jsonschema.validate(json.load(fh), DETECTIONS_SCHEMA)
        dets = read_detections(args.detections)
        classes, _, segments, _ = read_annotations(args.annotations)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as e:
        raise DataError(f"cannot read evaluation inputs: {e}") from e
    c = len(classes)
    for vid, ds in dets.items():
        for d in ds:
            if d.class_id >= c:
                raise DataError(f"{vid}: detection class {d.class_id} outside the {c} annotated classes")
    if not segments:
        raise DataError("annotations contain no ground-truth segments")
    report = map_report(dets, segments, tious, bands, num_classes=c)
    os.makedirs(args.out, exist_ok=True)
    report.write(os.path.join(args.out, "report.csv"), os.path.join(args.out, "report.json"))
    for name, v in report.bands.items():
        print(f"mAP[{name}] = {v:.4f}")


def _parse_grid(items):
    grid = {"l": [8, 16, 32, 64], "n": [2, 4, 8], "t": list(range(1, 65))}
    for item in items or []:
        key, _, val = item.partition("=")
        if key not in grid or not val:
            raise UsageError(f"bad grid item {item!r}; expected l=..., n=... or t=...")
        try:
            if ".." in val:
                lo, hi = val.split("..")
                grid[key] = list(range(int(lo), int(hi) + 1))
            else:
                grid[key] = [int(v) for v in val.split(",")]
        except ValueError:
            raise UsageError(f"bad grid item {item!r}") from None
        if not grid[key] or min(grid[key]) < (0 if key == "t" else 1):
            raise UsageError(f"grid values for {key} out of range")
    return grid


def cmd_bench_birw(args):
    grid = _parse_grid(args.grid)
    if not 0 <= args.w < 1:
        raise UsageError("w must lie in [0, 1)")
    rows = bench_birw(grid["l"], grid["n"], grid["t"], args.w, args.seed, args.repeats)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "max_err_vs_closed": repr(row["max_err_vs_closed"])})
    finally:
        if args.out:
            out.close()


def cmd_bench_kernels(args):
    from snippetprop.bench import KERNEL_FIELDS, bench_kernels
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = bench_kernels(sizes, repeats=args.repeats, seed=args.seed)
    w = csv.DictWriter(sys.stdout, KERNEL_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def _strategy_mu(strategy, feats, params, init_params, cfg):
    if strategy == "em_attention":
        return summarize_video(feats, params, cfg)[0]
    if strategy == "em_attention_fixed_init":
        fixed = ModelParams(params.embed, params.head, init_params.mu0)
        return summarize_video(feats, fixed, cfg)[0]
    sub = TrainConfig(**{**asdict(cfg), "summarizer": strategy})
    return summarize_video(feats, params, sub)[0]


def cmd_analyze(args):
    params, _, cfg, _ = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    _check_compatible(params, ds)
    init_params = ModelParams.init(params.embed.shape[0], params.head.num_classes, cfg)
    dump_dir = os.path.join(args.out, "dumps")
    os.makedirs(dump_dir, exist_ok=True)
    thresholds = np.asarray(DEFAULT_THRESHOLDS)
    per_rep = {s: [] for s in PROFILE_STRATEGIES}
    for f in ds.features:
        feats = nx.matmul(f.snippets, params.embed)
        lab = snippet_classes(ds, f.video_id, f.length, f.snippet_duration_s)
        with open(os.path.join(dump_dir, f"{f.video_id}.F.snpf"), "wb") as fh:
            fh.write(encode_matrix(feats, f.snippet_duration_s))
        _write_csv(os.path.join(dump_dir, f"{f.video_id}.labels.csv"), ["snippet", "class"], enumerate(lab.tolist()))
        for s in PROFILE_STRATEGIES:
            mu = _strategy_mu(s, feats, params, init_params, cfg)
            with open(os.path.join(dump_dir, f"{f.video_id}.mu.{s}.snpf"), "wb") as fh:
                fh.write(encode_matrix(mu, f.snippet_duration_s))
            per_rep[s].append(representativeness_counts(feats, mu, lab, thresholds))
    summary = {}
    for s in PROFILE_STRATEGIES:
        rows = np.vstack(per_rep[s]) if per_rep[s] else np.zeros((0, len(thresholds)))
        prof = rows.mean(axis=0) if len(rows) else np.full(len(thresholds), np.nan)
        _write_csv(os.path.join(args.out, f"profile_{s}.csv"), ["threshold", "proportion", "representatives"],
                   [[f"{t:.1f}", repr(float(p)), len(rows)] for t, p in zip(thresholds, prof)])
        summary[s] = [None if np.isnan(p) else float(p) for p in prof]
    _write_json(os.path.join(args.out, "profiles.json"),
                {"thresholds": [float(t) for t in thresholds], "profiles": summary})
    print(f"wrote profiles for {len(PROFILE_STRATEGIES)} strategies to {args.out}")


# -- entry ----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="snippetprop", description=__doc__)
    p.add_argument("--version", action="store_true", help="print version and build hash")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="detect action instances with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="run config whose detect section overrides the defaults")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score detections against annotations")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="run config whose eval section sets tIoUs and bands")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench-birw", help="iterative vs closed-form propagation timing and error")
    s.add_argument("--grid", nargs="*", metavar="KEY=VALUES", help="e.g. l=8,16 n=2,4 t=1..64")
    s.add_argument("--w", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench_birw)

    s = sub.add_parser("bench-kernels", help="compiled vs pure-Python kernel timing")
    s.add_argument("--sizes", default="16,64,256")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench_kernels)

    s = sub.add_parser("analyze", help="representativeness profiles and feature dumps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="analysis")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(f"snippetprop {__version__} build {build_hash()} backend {nx.backend()}")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, SingularMatrixError, FloatingPointError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
