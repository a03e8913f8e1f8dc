"""Temporal IoU, per-class average precision, and mAP over tIoU bands."""
from dataclasses import dataclass, field
import csv
import json

import numpy as np

DEFAULT_TIOUS = tuple(round(0.1 * k, 1) for k in range(1, 8))
DEFAULT_BANDS = {"0.1:0.5": (0.1, 0.5), "0.3:0.7": (0.3, 0.7), "0.1:0.7": (0.1, 0.7)}


def tiou(a, b):
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union


def sort_detections(dets):
    """Score descending, ties by earlier start. ``dets`` are (score, start, end) tuples."""
    return sorted(dets, key=lambda d: (-d[0], d[1]))


def match_detections(dets, gts, tiou_thr):
    """Greedy matching in score order; returns a TP flag per sorted detection."""
    used = [False] * len(gts)
    flags = []
    for _, s, e in sort_detections(dets):
        j = _best_unmatched((s, e), gts, used)
        hit = j >= 0 and tiou((s, e), gts[j]) > tiou_thr
        if hit:
            used[j] = True
        flags.append(hit)
    return flags


def _best_unmatched(seg, gts, used):
    """Index of the unmatched GT with the highest tIoU (first on ties), or -1."""
    best, best_j = -1.0, -1
    for j, g in enumerate(gts):
        if used[j]:
            continue
        ov = tiou(seg, g)
        if ov > best:
            best, best_j = ov, j
    return best_j


def average_precision(dets, gts, tiou_thr):
    """All-point interpolated AP for one class.

    ``dets``: (score, start, end); ``gts``: (start, end). Zero when there are
    no detections; undefined (raises) when there is no ground truth.
    """
    if not gts:
        raise ValueError("average precision is undefined without ground truth")
    return _ap_from_flags(match_detections(dets, gts, tiou_thr), len(gts))


@dataclass
class EvalReport:
    classes: list
    tious: tuple
    ap: np.ndarray                    # (len(classes), len(tious)), NaN where a class has no GT
    mean_ap: np.ndarray               # (len(tious),)
    bands: dict = field(default_factory=dict)

    def rows(self):
        for ci, k in enumerate(self.classes):
            for ti, t in enumerate(self.tious):
                if not np.isnan(self.ap[ci, ti]):
                    yield k, t, float(self.ap[ci, ti])

    def summary(self):
        return {
            "tious": list(self.tious),
            "mAP": {f"{t:.1f}": float(m) for t, m in zip(self.tious, self.mean_ap)},
            "bands": {k: float(v) for k, v in self.bands.items()},
            "classes_scored": [k for ci, k in enumerate(self.classes) if not np.isnan(self.ap[ci]).all()],
        }

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "tiou", "AP"])
            for k, t, v in self.rows():
                w.writerow([k, f"{t:.1f}", repr(v)])
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def band_average(tious, mean_ap, lo, hi):
    sel = [m for t, m in zip(tious, mean_ap) if lo - 1e-9 <= t <= hi + 1e-9]
    if not sel:
        raise ValueError(f"band {lo}:{hi} contains no evaluated threshold")
    return float(np.mean(sel))


def map_report(detections, ground_truth, tious=DEFAULT_TIOUS, bands=None, num_classes=None):
    """mAP over all videos.

    ``detections``: {video_id: [ActionInstance]}; ``ground_truth``: list of
    GroundTruthSegment. Classes without ground truth are left out of the mean.
    """
    if not ground_truth:
        raise ValueError("no ground-truth segments to evaluate against")
    bands = DEFAULT_BANDS if bands is None else bands
    tious = tuple(tious)
    if num_classes is None:
        top = max([g.class_id for g in ground_truth]
                  + [d.class_id for ds in detections.values() for d in ds])
        num_classes = top + 1
    gts = {}
    for g in ground_truth:
        gts.setdefault((g.class_id, g.video_id), []).append((g.start_s, g.end_s))
    ap = np.full((num_classes, len(tious)), np.nan)
    for k in range(num_classes):
        vids = sorted({v for (c, v) in gts if c == k})
        if not vids:
            continue
        # pool detections of class k across videos; matching stays within a video
        pooled = []
        for vid, ds in detections.items():
            for d in ds:
                if d.class_id == k:
                    pooled.append((d.score, d.start_s, d.end_s, vid))
        pooled.sort(key=lambda d: (-d[0], d[3], d[1]))
        n_gt = sum(len(gts[(k, v)]) for v in vids)
        for ti, thr in enumerate(tious):
            used = {v: [False] * len(gts[(k, v)]) for v in vids}
            flags = []
            for score, start, end, vid in pooled:
                cand = gts.get((k, vid), [])
                j = _best_unmatched((start, end), cand, used.get(vid, []))
                hit = j >= 0 and tiou((start, end), cand[j]) > thr
                if hit:
                    used[vid][j] = True
                flags.append(hit)
            ap[k, ti] = _ap_from_flags(flags, n_gt)
    mean_ap = np.nanmean(ap, axis=0)
    band_vals = {name: band_average(tious, mean_ap, lo, hi) for name, (lo, hi) in bands.items()}
    return EvalReport(list(range(num_classes)), tious, ap, mean_ap, band_vals)


def _ap_from_flags(flags, n_gt):
    """Area under the precision envelope (running max from the right) against recall."""
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(np.logical_not(flags))
    rec = tp / n_gt
    prec = tp / (tp + fp)
    env = np.maximum.accumulate(prec[::-1])[::-1]
    prev = np.concatenate([[0.0], rec[:-1]])
    return float(((rec - prev) * env).sum())
