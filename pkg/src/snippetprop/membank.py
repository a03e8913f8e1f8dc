"""Per-class memory of the highest-scoring representative snippets."""
import hashlib
import json

import numpy as np

from snippetprop.datamodel import decode_matrix, encode_matrix, FormatError


class BankEmpty(LookupError):
    """No filled slot exists for any requested class."""


class MemoryBank:
    """Two tables: features (c, s, d) and scores (c, s).

    Each class row keeps its filled slots packed at the front, sorted by
    score descending. ``filled[k]`` counts valid slots; the rest are never
    read.
    """

    def __init__(self, num_classes, feature_dim, slots=5):
        if num_classes < 1 or feature_dim < 1 or slots < 1:
            raise ValueError("memory bank dimensions must all be >= 1")
        self.features = np.zeros((num_classes, slots, feature_dim))
        self.scores = np.full((num_classes, slots), -np.inf)
        self.filled = np.zeros(num_classes, dtype=np.int64)

    @property
    def num_classes(self):
        return self.features.shape[0]

    @property
    def slots(self):
        return self.features.shape[1]

    @property
    def feature_dim(self):
        return self.features.shape[2]

    def is_empty(self, classes=None):
        classes = range(self.num_classes) if classes is None else classes
        return all(self.filled[k] == 0 for k in classes)

    def offer(self, class_id, rows, scores):
        """Merge candidates into class ``class_id``; returns the number of slots that changed.

        Incumbents win ties, and among candidates an earlier row wins. A
        candidate identical to a stored entry is ignored.
        """
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class {class_id} outside [0, {self.num_classes})")
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        scores = np.atleast_1d(np.asarray(scores, dtype=np.float64))
        if rows.shape[0] != scores.shape[0]:
            raise ValueError(f"{rows.shape[0]} rows but {scores.shape[0]} scores")
        if rows.shape[0] and rows.shape[1] != self.feature_dim:
            raise ValueError(f"rows have dim {rows.shape[1]}, bank stores {self.feature_dim}")
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        n_old = int(self.filled[class_id])
        old_f = self.features[class_id, :n_old]
        old_s = self.scores[class_id, :n_old]
        if n_old and len(rows):
            # re-offering a stored (feature, score) pair is a no-op
            dup = ((rows[:, None, :] == old_f[None, :, :]).all(axis=-1)
                   & (scores[:, None] == old_s[None, :])).any(axis=1)
            rows, scores = rows[~dup], scores[~dup]
        all_s = np.concatenate([old_s, scores])
        all_f = np.concatenate([old_f, rows]) if len(rows) else old_f
        # incumbents precede candidates, so a stable sort on -score keeps them on ties
        order = np.argsort(-all_s, kind="stable")[: self.slots]
        keep = len(order)
        new_f = all_f[order]
        new_s = all_s[order]
        changed = int(np.count_nonzero(
            (order[:keep] >= n_old) | (order[:keep] != np.arange(keep))
        ))
        self.features[class_id, :keep] = new_f
        self.scores[class_id, :keep] = new_s
        self.filled[class_id] = keep
        return changed

    def retrieve(self, classes):
        """Filled rows of the given classes in (class ascending, score descending) order."""
        classes = sorted(set(int(k) for k in classes))
        for k in classes:
            if not 0 <= k < self.num_classes:
                raise IndexError(f"class {k} outside [0, {self.num_classes})")
        parts = [self.features[k, : self.filled[k]] for k in classes]
        parts = [p for p in parts if len(p)]
        if not parts:
            raise BankEmpty(f"no stored representatives for classes {classes}")
        return np.concatenate(parts).copy()

    def entries(self, class_id):
        n = int(self.filled[class_id])
        return self.features[class_id, :n].copy(), self.scores[class_id, :n].copy()

    def state_hash(self):
        h = hashlib.sha256()
        for a in (self.features, self.scores, self.filled):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    # -- snapshot --------------------------------------------------------------

    def to_snapshot(self):
        """(header dict, SNPF payload bytes). Features are flattened to (c*s, d)."""
        header = {
            "c": self.num_classes,
            "s": self.slots,
            "d": self.feature_dim,
            "filled": [int(v) for v in self.filled],
            "scores": [[float(v) for v in self.scores[k, : self.filled[k]]] for k in range(self.num_classes)],
        }
        flat = self.features.reshape(-1, self.feature_dim)
        return header, encode_matrix(flat)

    @classmethod
    def from_snapshot(cls, header, payload):
        bank = cls(header["c"], header["d"], header["s"])
        flat, _ = decode_matrix(payload)
        if flat.shape != (bank.num_classes * bank.slots, bank.feature_dim):
            raise FormatError(f"bank payload shape {flat.shape} does not match header")
        feats = flat.reshape(bank.features.shape)
        for k in range(bank.num_classes):
            n = int(header["filled"][k])
            if n > bank.slots or len(header["scores"][k]) != n:
                raise FormatError(f"class {k}: inconsistent filled count")
            bank.filled[k] = n
            bank.features[k, :n] = feats[k, :n]
            bank.scores[k, :n] = header["scores"][k]
        return bank

    def save(self, path_json, path_payload):
        header, payload = self.to_snapshot()
        with open(path_json, "w") as fh:
            json.dump(header, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(path_payload, "wb") as fh:
            fh.write(payload)

    @classmethod
    def load(cls, path_json, path_payload):
        with open(path_json) as fh:
            header = json.load(fh)
        with open(path_payload, "rb") as fh:
            payload = fh.read()
        return cls.from_snapshot(header, payload)
