"""From TCAMs to scored temporal action instances.

Test-time flow: fuse the main and intra-video branches, drop classes whose
fused video score is under the gate, threshold the foreground-weighted class
activation at several levels, score each run by outer-inner contrast plus
the video class score, then apply per-class greedy temporal NMS.
"""
from dataclasses import dataclass, field
import json

import numpy as np

from snippetprop.evaluation import tiou


@dataclass(frozen=True)
class ActionInstance:
    class_id: int
    score: float
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(f"invalid instance bounds [{self.start_s}, {self.end_s}]")
        if not np.isfinite(self.score):
            raise ValueError("instance score must be finite")


@dataclass
class DetectConfig:
    class_threshold: float = 0.1
    act_thresholds: tuple = field(default_factory=lambda: tuple(round(0.1 * k, 1) for k in range(1, 10)))
    nms_tiou: float = 0.5
    outer_ratio: float = 0.25
    fusion_main_intra: float = 0.5
    upsample: int = 1

    def __post_init__(self):
        self.act_thresholds = tuple(float(t) for t in self.act_thresholds)
        if not all(0 < t < 1 for t in self.act_thresholds):
            raise ValueError("activation thresholds must lie in (0, 1)")
        if list(self.act_thresholds) != sorted(self.act_thresholds):
            raise ValueError("activation thresholds must be sorted ascending")
        if not 0 < self.class_threshold < 1:
            raise ValueError("class_threshold must lie in (0, 1)")
        if not 0 <= self.fusion_main_intra <= 1:
            raise ValueError("fusion_main_intra must lie in [0, 1]")
        if self.upsample < 1:
            raise ValueError("upsample factor must be >= 1")


@dataclass
class FusedOutput:
    video_scores: np.ndarray  # (c+1,)
    tcam: np.ndarray          # (l, c+1)
    lambda_f: np.ndarray      # (l,)


def fuse_test_outputs(main, intra, weight):
    """Convex combination ``weight * main + (1 - weight) * intra``.

    Each branch's video score is first the mean of its CA and MIL
    distributions. ``intra`` may be None, in which case main is returned.
    """
    def scores(o):
        return 0.5 * (o.p_ca + o.p_mil)

    if intra is None:
        return FusedOutput(scores(main), main.tcam.copy(), main.lambda_f.copy())
    if main.tcam.shape != intra.tcam.shape:
        raise ValueError(f"branch shapes differ: {main.tcam.shape} vs {intra.tcam.shape}")
    w = weight
    return FusedOutput(
        w * scores(main) + (1 - w) * scores(intra),
        w * main.tcam + (1 - w) * intra.tcam,
        w * main.lambda_f + (1 - w) * intra.lambda_f,
    )


def upsample_linear(seq, factor=None, length=None):
    """Per-column linear interpolation onto ``length`` points (or ``l * factor``).

    Endpoints are preserved. A single input row is broadcast.
    """
    seq = np.asarray(seq, dtype=np.float64)
    squeeze = seq.ndim == 1
    if squeeze:
        seq = seq[:, None]
    l = seq.shape[0]
    if l < 1:
        raise ValueError("cannot upsample an empty sequence")
    if length is None:
        length = l * (1 if factor is None else int(factor))
    if length < 1:
        raise ValueError("target length must be >= 1")
    if l == 1:
        out = np.repeat(seq, length, axis=0)
    elif length == 1:
        out = seq[:1].copy()
    else:
        pos = np.linspace(0.0, l - 1.0, length)
        lo = np.minimum(np.floor(pos).astype(int), l - 2)
        frac = (pos - lo)[:, None]
        out = (1 - frac) * seq[lo] + frac * seq[lo + 1]
    return out[:, 0] if squeeze else out


def runs_above(act, threshold):
    """Maximal runs ``(i, j)`` (inclusive) with ``act > threshold``."""
    above = np.concatenate([[False], np.asarray(act) > threshold, [False]])
    edges = np.flatnonzero(above[1:] != above[:-1])
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def propose(act, thresholds, snippet_duration_s=1.0):
    """Candidate segments in seconds, the union over all thresholds (duplicates kept)."""
    act = np.asarray(act, dtype=np.float64)
    if not np.isfinite(act).all():
        raise ValueError("activation must be finite")
    out = []
    for th in thresholds:
        for i, j in runs_above(act, th):
            out.append((i * snippet_duration_s, (j + 1) * snippet_duration_s))
    return out


def score_proposal(act, seg, outer_ratio, video_class_score, snippet_duration_s=1.0):
    """Outer-inner contrast plus the video-level class score."""
    act = np.asarray(act, dtype=np.float64)
    i = int(round(seg[0] / snippet_duration_s))
    j = int(round(seg[1] / snippet_duration_s))
    if not 0 <= i < j <= len(act):
        raise ValueError(f"segment {seg} outside activation of length {len(act)}")
    inner = act[i:j].mean()
    # flank covers every snippet the outer_ratio * |seg| interval touches
    pad = int(np.ceil(outer_ratio * (j - i) - 1e-9))
    outer = np.concatenate([act[max(0, i - pad):i], act[j:min(len(act), j + pad)]])
    outer_mean = outer.mean() if len(outer) else 0.0
    return float(inner - outer_mean + video_class_score)


def _nms_key(inst):
    return (-inst.score, inst.start_s, inst.end_s - inst.start_s)


def temporal_nms(instances, tiou_threshold):
    """Greedy per-class NMS: keep in order of score, drop anything overlapping a keeper."""
    kept = []
    for inst in sorted(instances, key=_nms_key):
        if all(k.class_id != inst.class_id
               or tiou((k.start_s, k.end_s), (inst.start_s, inst.end_s)) <= tiou_threshold
               for k in kept):
            kept.append(inst)
    return kept


def detect_video(main, intra, cfg, snippet_duration_s=1.0):
    fused = fuse_test_outputs(main, intra, cfg.fusion_main_intra)
    c = fused.tcam.shape[1] - 1
    step = snippet_duration_s
    tcam, lam = fused.tcam, fused.lambda_f
    if cfg.upsample > 1:
        tcam = upsample_linear(tcam, cfg.upsample)
        lam = upsample_linear(lam, cfg.upsample)
        step = snippet_duration_s / cfg.upsample
    found = []
    for k in range(c):
        if fused.video_scores[k] < cfg.class_threshold:
            continue
        act = lam * tcam[:, k]
        for seg in dict.fromkeys(propose(act, cfg.act_thresholds, step)):
            q = score_proposal(act, seg, cfg.outer_ratio, float(fused.video_scores[k]), step)
            found.append(ActionInstance(k, q, seg[0], seg[1]))
    return temporal_nms(found, cfg.nms_tiou)


# -- export ----------------------------------------------------------------------

def detections_to_json(detections):
    """``{video_id: [{"class", "score", "start_s", "end_s"}, ...]}`` with sorted keys."""
    return {
        vid: [{"class": d.class_id, "score": d.score, "start_s": d.start_s, "end_s": d.end_s} for d in dets]
        for vid, dets in sorted(detections.items())
    }


def write_detections(detections, path):
    with open(path, "w") as fh:
        json.dump(detections_to_json(detections), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_detections(path):
    with open(path) as fh:
        doc = json.load(fh)
    return {
        vid: [ActionInstance(int(d["class"]), float(d["score"]), float(d["start_s"]), float(d["end_s"])) for d in dets]
        for vid, dets in doc.items()
    }


DETECTIONS_SCHEMA = {
    "type": "object",
    "additionalProperties": {
        "type": "array",
        "items": {
            "type": "object",
            "required": ["class", "score", "start_s", "end_s"],
            "additionalProperties": False,
            "properties": {
                "class": {"type": "integer", "minimum": 0},
                "score": {"type": "number"},
                "start_s": {"type": "number", "minimum": 0},
                "end_s": {"type": "number", "minimum": 0},
            },
        },
    },
}
