import hashlib
import json
import os

import pytest

from snippetprop.cli import main, validate_run_config, UsageError
from snippetprop.datamodel import Dataset, save_dataset

RUN = {
    "seed": 4,
    "synth": {"num_classes": 2, "feature_dim": 4, "num_videos": 4, "snippets_per_video": [10, 12],
              "actions_per_video": [1, 1], "action_length": [2, 4]},
    "train": {"variant": "full", "epochs": 3, "bank_start_epoch": 1, "embed_dim": 4, "num_reps": 2, "lr": 0.05},
}


def digest_tree(root):
    h = hashlib.sha256()
    for dirpath, dirs, files in sorted(os.walk(root)):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            h.update(open(path, "rb").read())
    return h.hexdigest()


def run_all(tmp, cfg_path):
    assert main(["synth", "--config", cfg_path, "--out", f"{tmp}/data"]) == 0
    assert main(["train", "--config", cfg_path, "--data", f"{tmp}/data", "--out", f"{tmp}/ckpt"]) == 0
    assert main(["infer", "--ckpt", f"{tmp}/ckpt", "--data", f"{tmp}/data", "--out", f"{tmp}/dets.json"]) == 0
    assert main(["eval", "--detections", f"{tmp}/dets.json", "--annotations", f"{tmp}/data/annotations.json",
                 "--out", f"{tmp}/report"]) == 0


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(RUN))
    run_all(root / "a", str(cfg))
    return root, str(cfg)


def test_pipeline_reruns_are_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    run_all(tmp_path, cfg)
    for part in ("data", "ckpt", "dets.json", "report"):
        a, b = root / "a" / part, tmp_path / part
        if a.is_dir():
            assert digest_tree(a) == digest_tree(b), part
        else:
            assert a.read_bytes() == b.read_bytes(), part
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert set(report["bands"]) == {"0.1:0.5", "0.3:0.7", "0.1:0.7"}
    assert (root / "a" / "ckpt" / "history.csv").exists()


def test_threaded_infer_matches(workspace, tmp_path, monkeypatch):
    root, _ = workspace
    monkeypatch.setenv("SNIPPETPROP_THREADS", "4")
    out = tmp_path / "d.json"
    assert main(["infer", "--ckpt", str(root / "a/ckpt"), "--data", str(root / "a/data"), "--out", str(out)]) == 0
    assert out.read_bytes() == (root / "a" / "dets.json").read_bytes()
    monkeypatch.setenv("SNIPPETPROP_THREADS", "zero")
    assert main(["infer", "--ckpt", str(root / "a/ckpt"), "--data", str(root / "a/data"), "--out", str(out)]) == 1


def test_empty_dataset_gives_empty_detections(workspace, tmp_path):
    root, _ = workspace
    save_dataset(Dataset([], [], [], ["c0", "c1"]), tmp_path / "empty")
    out = tmp_path / "d.json"
    assert main(["infer", "--ckpt", str(root / "a/ckpt"), "--data", str(tmp_path / "empty"), "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == {}


@pytest.mark.parametrize("mutate,needle", [
    (lambda d: d.pop("train"), "missing required key 'train'"),
    (lambda d: d["synth"].update(bogus=1), "unknown key 'bogus' in synth"),
    (lambda d: d.update(paths={}), "unknown key 'paths' in <root>"),
    (lambda d: d["train"].update(variant="nope"), "train/variant"),
])
def test_schema_errors_name_the_key(mutate, needle):
    doc = json.loads(json.dumps(RUN))
    mutate(doc)
    with pytest.raises(UsageError, match=needle):
        validate_run_config(doc)


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**RUN, "extra": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "unknown key 'extra'" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1
    assert main([]) == 1
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "c")]) == 2
    (tmp_path / "dets.json").write_text('{"v": [{"class": 0}]}')
    assert main(["eval", "--detections", str(tmp_path / "dets.json"),
                 "--annotations", str(root / "a/data/annotations.json"), "--out", str(tmp_path / "r")]) == 2
    (tmp_path / "dets.json").write_text('{"v": [{"class": 9, "score": 1, "start_s": 0, "end_s": 1}]}')
    assert main(["eval", "--detections", str(tmp_path / "dets.json"),
                 "--annotations", str(root / "a/data/annotations.json"), "--out", str(tmp_path / "r")]) == 2


def test_numeric_abort_exit_code(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "run.json"
    doc = json.loads(json.dumps(RUN))
    doc["train"]["lr"] = 1e300
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg), "--data", str(root / "a/data"), "--out", str(tmp_path / "c")]) == 3


def test_version(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out.split()
    assert out[0] == "snippetprop" and out[2] == "build" and len(out[3]) == 12 and out[4] == "backend"


def test_bench_birw(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench-birw", "--grid", "l=8", "n=2", "t=1..4", "--repeats", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("l,") and len(lines) == 1 + 5
    assert main(["bench-birw", "--grid", "q=1"]) == 1


def test_analyze(workspace, tmp_path):
    root, _ = workspace
    out = tmp_path / "an"
    assert main(["analyze", "--ckpt", str(root / "a/ckpt"), "--data", str(root / "a/data"), "--out", str(out)]) == 0
    prof = json.loads((out / "profiles.json").read_text())
    assert set(prof["profiles"]) == {"em_attention", "em_attention_fixed_init", "top_score", "kmeans"}
    assert len(prof["thresholds"]) == 9
    assert (out / "dumps" / "video_000.F.snpf").exists()
