"""Videos, labels, segments, their file formats, and the synthetic generator.

Feature files use the little-endian SNPF layout::

    b"SNPF" | u32 version=1 | u32 l | u32 d | f32 snippet_duration_s | l*d f32 row-major

Annotations are one JSON document per dataset (see ``write_annotations``).
"""
from dataclasses import dataclass, field
import json
import os
import struct

import numpy as np

from snippetprop.numerics import as_mat

MAGIC = b"SNPF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIf")
MAX_DIM = 1 << 24


class FormatError(ValueError):
    """Malformed feature or annotation file."""


@dataclass
class FeatureSequence:
    video_id: str
    snippets: np.ndarray
    snippet_duration_s: float = 1.0

    def __post_init__(self):
        self.snippets = as_mat(self.snippets, f"features of {self.video_id!r}")
        l, d = self.snippets.shape
        if l < 1 or d < 1:
            raise ValueError(f"{self.video_id}: empty feature matrix {self.snippets.shape}")
        if not self.snippet_duration_s > 0:
            raise ValueError(f"{self.video_id}: snippet duration must be positive")

    @property
    def length(self):
        return self.snippets.shape[0]

    @property
    def duration_s(self):
        return self.length * self.snippet_duration_s


@dataclass
class VideoLabel:
    video_id: str
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.ndim != 1 or not np.isin(self.y, (0, 1)).all():
            raise ValueError(f"{self.video_id}: label vector must be binary")

    @property
    def active(self):
        return [int(k) for k in np.flatnonzero(self.y)]


@dataclass(frozen=True)
class GroundTruthSegment:
    video_id: str
    class_id: int
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(f"invalid segment [{self.start_s}, {self.end_s}] in {self.video_id}")


@dataclass
class SynthConfig:
    num_classes: int = 4
    feature_dim: int = 16
    num_videos: int = 20
    snippets_per_video: tuple = (40, 60)
    actions_per_video: tuple = (1, 3)
    action_length: tuple = (4, 12)
    prototypes_per_class: int = 2
    nonnegative_prototypes: bool = False  # fold prototypes into the positive orthant
    noise_sigma: float = 0.25
    background_sigma: float = 0.25
    scene_strength: float = 0.0  # weight of a per-video background direction
    scene_pool: int = 0  # number of shared scene directions; 0 draws a fresh one per video
    snippet_duration_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.snippets_per_video = tuple(self.snippets_per_video)
        self.actions_per_video = tuple(self.actions_per_video)
        self.action_length = tuple(self.action_length)
        for name in ("num_classes", "feature_dim", "num_videos", "prototypes_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("snippets_per_video", "actions_per_video", "action_length"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a range (lo, hi) with 1 <= lo <= hi")
        if self.noise_sigma < 0 or self.background_sigma < 0:
            raise ValueError("sigmas must be non-negative")
        if self.scene_pool < 0:
            raise ValueError("scene_pool must be non-negative")
        if self.scene_strength < 0:
            raise ValueError("scene_strength must be non-negative")


@dataclass
class Dataset:
    features: list
    labels: list
    segments: list
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.features)

    def segments_of(self, video_id):
        return [s for s in self.segments if s.video_id == video_id]

    def subset(self, ids):
        keep = set(ids)
        return Dataset(
            [f for f in self.features if f.video_id in keep],
            [y for y in self.labels if y.video_id in keep],
            [s for s in self.segments if s.video_id in keep],
            list(self.class_names),
        )


# -- SNPF binary ---------------------------------------------------------------

def encode_matrix(m, snippet_duration_s=1.0):
    m = np.asarray(m)
    if m.ndim != 2:
        raise FormatError(f"can only encode 2-D matrices, got shape {m.shape}")
    l, d = m.shape
    if np.isfinite(m).all() and np.abs(m).max(initial=0.0) > np.finfo(np.float32).max:
        raise FormatError("matrix values overflow float32")
    header = _HEADER.pack(MAGIC, VERSION, l, d, float(snippet_duration_s))
    return header + np.ascontiguousarray(m, dtype="<f4").tobytes()


def decode_matrix(buf, allow_empty=False):
    """Parse SNPF bytes. Returns (matrix float64, snippet_duration_s)."""
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, l, d, dur = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if l > MAX_DIM or d > MAX_DIM:
        raise FormatError(f"dimension overflow ({l} x {d})")
    if not allow_empty and (l == 0 or d == 0):
        raise FormatError(f"empty matrix ({l} x {d})")
    need = _HEADER.size + 4 * l * d
    if len(buf) != need:
        raise FormatError(f"payload is {len(buf)} bytes, header implies {need}")
    data = np.frombuffer(buf, dtype="<f4", count=l * d, offset=_HEADER.size)
    return data.reshape(l, d).astype(np.float64), float(dur)


def write_features(f, path):
    with open(path, "wb") as fh:
        fh.write(encode_matrix(f.snippets, f.snippet_duration_s))


def read_features(path, video_id=None):
    with open(path, "rb") as fh:
        m, dur = decode_matrix(fh.read())
    if video_id is None:
        video_id = os.path.splitext(os.path.basename(path))[0]
    return FeatureSequence(video_id, m, dur)


# -- annotation JSON -----------------------------------------------------------

def annotations_doc(dataset):
    videos = []
    for f, y in zip(dataset.features, dataset.labels):
        videos.append({
            "id": f.video_id,
            "labels": y.active,
            "duration_s": f.duration_s,
            "segments": [
                {"class": s.class_id, "start_s": s.start_s, "end_s": s.end_s}
                for s in dataset.segments_of(f.video_id)
            ],
        })
    return {"classes": list(dataset.class_names), "videos": videos}


def write_annotations(dataset, path):
    with open(path, "w") as fh:
        json.dump(annotations_doc(dataset), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_annotations(path):
    """Returns (class_names, labels, segments, durations keyed by video id)."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        classes = list(doc["classes"])
        labels, segments, durations = [], [], {}
        for v in doc["videos"]:
            y = np.zeros(len(classes), dtype=np.int64)
            for k in v["labels"]:
                if not 0 <= k < len(classes):
                    raise FormatError(f"{v['id']}: label {k} outside class universe")
                y[k] = 1
            labels.append(VideoLabel(v["id"], y))
            durations[v["id"]] = float(v["duration_s"])
            for s in v["segments"]:
                segments.append(GroundTruthSegment(v["id"], int(s["class"]), float(s["start_s"]), float(s["end_s"])))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed annotation document: {exc!r}") from exc
    return classes, labels, segments, durations


def save_dataset(dataset, out_dir):
    """Write features/<id>.snpf, annotations.json and manifest.json."""
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for f in dataset.features:
        write_features(f, os.path.join(feat_dir, f"{f.video_id}.snpf"))
    write_annotations(dataset, os.path.join(out_dir, "annotations.json"))
    manifest = {
        "videos": [f.video_id for f in dataset.features],
        "feature_dir": "features",
        "annotations": "annotations.json",
        "num_classes": len(dataset.class_names),
        "feature_dim": int(dataset.features[0].snippets.shape[1]) if dataset.features else 0,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    classes, labels, segments, _ = read_annotations(os.path.join(data_dir, manifest["annotations"]))
    by_id = {y.video_id: y for y in labels}
    feats, ys = [], []
    for vid in manifest["videos"]:
        feats.append(read_features(os.path.join(data_dir, manifest["feature_dir"], f"{vid}.snpf"), vid))
        if vid not in by_id:
            raise FormatError(f"video {vid!r} has no annotation entry")
        ys.append(by_id[vid])
    return Dataset(feats, ys, segments, classes)


# -- synthetic data ------------------------------------------------------------

def class_prototypes(cfg):
    """(c, prototypes_per_class, d) unit vectors, drawn from the seed alone."""
    rng = np.random.default_rng([cfg.seed, 0])
    p = rng.standard_normal((cfg.num_classes, cfg.prototypes_per_class, cfg.feature_dim))
    if cfg.nonnegative_prototypes:
        p = np.abs(p)
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def _pack_segments(rng, length, n_actions, len_lo, len_hi):
    """Place n non-overlapping runs inside [0, length) or raise."""
    lengths = rng.integers(len_lo, len_hi + 1, size=n_actions)
    if lengths.sum() > length:
        lengths = np.full(n_actions, len_lo)
        if lengths.sum() > length:
            raise ValueError(
                f"cannot pack {n_actions} actions of >= {len_lo} snippets into {length} snippets")
    slack = length - int(lengths.sum())
    # stars and bars: distribute slack into n+1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=n_actions))
    gaps = np.diff(np.concatenate([[0], cuts]))
    out, pos = [], 0
    for g, ln in zip(gaps, lengths):
        pos += int(g)
        out.append((pos, pos + int(ln)))
        pos += int(ln)
    return out


def generate_synthetic(cfg, prefix="video"):
    """Planted-prototype features with weak labels and ground-truth segments.

    Background snippets are isotropic noise with scale ``background_sigma``;
    action snippets are one of the class's unit prototypes plus noise with
    scale ``noise_sigma``. Each action instance draws one prototype, so the
    same class looks different across instances.

    With ``scene_strength > 0`` each video also gets a background direction
    (from a shared pool of ``scene_pool`` directions, or fresh per video when
    the pool is 0) added to its background snippets with that weight. Scenes
    come from their own random stream, so the rest of the data is unchanged.
    """
    protos = class_prototypes(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    scene_rng = np.random.default_rng([cfg.seed, 3])
    pool = scene_rng.standard_normal((cfg.scene_pool, cfg.feature_dim))
    c, d = cfg.num_classes, cfg.feature_dim
    num_videos = cfg.num_videos
    feats, labels, segs = [], [], []
    width = max(3, len(str(num_videos - 1)))
    for v in range(num_videos):
        vid = f"{prefix}_{v:0{width}d}"
        length = int(rng.integers(cfg.snippets_per_video[0], cfg.snippets_per_video[1] + 1))
        n_act = int(rng.integers(cfg.actions_per_video[0], cfg.actions_per_video[1] + 1))
        runs = _pack_segments(rng, length, n_act, *cfg.action_length)
        x = cfg.background_sigma * rng.standard_normal((length, d))
        if cfg.scene_strength > 0:
            if cfg.scene_pool:
                scene = pool[int(scene_rng.integers(cfg.scene_pool))]
            else:
                scene = scene_rng.standard_normal(d)
            x += cfg.scene_strength * scene / np.linalg.norm(scene)
        y = np.zeros(c, dtype=np.int64)
        for start, end in runs:
            k = int(rng.integers(c))
            p = int(rng.integers(cfg.prototypes_per_class))
            x[start:end] = protos[k, p] + cfg.noise_sigma * rng.standard_normal((end - start, d))
            y[k] = 1
            segs.append(GroundTruthSegment(vid, k, start * cfg.snippet_duration_s, end * cfg.snippet_duration_s))
        # stored precision is f32; round now so memory and disk agree
        x = x.astype(np.float32).astype(np.float64)
        feats.append(FeatureSequence(vid, x, cfg.snippet_duration_s))
        labels.append(VideoLabel(vid, y))
    names = [f"class_{k}" for k in range(c)]
    return Dataset(feats, labels, segs, names)


def snippet_classes(dataset, video_id, length, snippet_duration_s=1.0, background=-1):
    """Per-snippet ground-truth class (``background`` where no segment covers it)."""
    out = np.full(length, background, dtype=np.int64)
    for s in dataset.segments_of(video_id):
        a = int(round(s.start_s / snippet_duration_s))
        b = int(round(s.end_s / snippet_duration_s))
        out[a:b] = s.class_id
    return out
