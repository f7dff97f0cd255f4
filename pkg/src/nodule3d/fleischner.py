"""Follow-up prediction from per-patient nodule counts.

A patient is summarised by six counts: nodules per volume bin (<100,
100-250, >250 mm^3) and nodules per texture (GGO, part-solid, solid).  A
Random Forest maps those counts to a follow-up class.  A small deterministic
rule table over the same counts stands in for the clinical guideline when
generating labelled synthetic data.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (DegenerateDataError, InvalidInputError, LoadError,
                     MissingModelError)

SMALL_MAX_MM3 = 100.0
MEDIUM_MAX_MM3 = 250.0
FEATURE_COUNT = 6
CSV_HEADER = ["patient_id", "nodule_id", "volume_mm3", "texture", "is_nodule"]


class Texture(enum.IntEnum):
    GGO = 0
    PARTSOLID = 1
    SOLID = 2


class SizeBin(enum.IntEnum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2


@dataclass
class NoduleRecord:
    patient_id: str
    volume_mm3: float
    texture: Optional[Texture] = None
    is_nodule: bool = True
    source: str = "ground_truth"
    nodule_id: str = ""
    # free slot for whatever the Classifier filter needs to look the candidate up
    payload: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.volume_mm3) or self.volume_mm3 < 0:
            raise InvalidInputError(f"volume must be finite and >= 0, got {self.volume_mm3}")
        if self.texture is not None:
            self.texture = Texture(self.texture)


@dataclass(frozen=True)
class PatientFeatures:
    counts: tuple

    def __post_init__(self):
        if len(self.counts) != FEATURE_COUNT or any(c < 0 for c in self.counts):
            raise InvalidInputError(f"need six non-negative counts, got {self.counts}")

    @property
    def n_small(self):
        return self.counts[0]

    @property
    def n_medium(self):
        return self.counts[1]

    @property
    def n_large(self):
        return self.counts[2]

    @property
    def n_non_solid(self):
        return self.counts[3] + self.counts[4]

    @property
    def total(self):
        return sum(self.counts[:3])

    def as_array(self, size_only=False):
        return np.array(self.counts[:3] if size_only else self.counts, dtype=np.float64)


# ---------------------------------------------------------------------------
# volumes and filtration


def mask_volume_mm3(mask, spacing_mm=(1.0, 1.0, 1.0)):
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise InvalidInputError("spacing must be three positive numbers")
    return float(np.count_nonzero(np.asarray(mask) > 0) * np.prod(spacing))


def volume_bin(v):
    """<100 small, [100, 250] medium, >250 large."""
    if v < 0:
        raise InvalidInputError("volume must be >= 0")
    if v < SMALL_MAX_MM3:
        return SizeBin.SMALL
    if v <= MEDIUM_MAX_MM3:
        return SizeBin.MEDIUM
    return SizeBin.LARGE


NODULE_CLASS = 1  # index of "nodule" in the recognizer's two-way output


def filter_non_nodules(records, mode="volume", min_volume_voxels=8,
                       spacing_mm=(1.0, 1.0, 1.0),
                       recognizer: Optional[Callable[[NoduleRecord], Sequence[float]]] = None):
    """Keep only candidates judged to be nodules.

    ``mode="volume"`` drops candidates whose mask has fewer than
    ``min_volume_voxels`` voxels.  ``mode="classifier"`` calls
    ``recognizer(record)`` for two-way probabilities ``[non-nodule, nodule]``
    and drops those whose argmax is non-nodule.
    """
    if mode == "volume":
        voxel = float(np.prod(spacing_mm))
        return [r for r in records if round(r.volume_mm3 / voxel) >= min_volume_voxels]
    if mode == "classifier":
        if recognizer is None:
            raise MissingModelError("classifier filtration needs a trained recognizer")
        return [r for r in records if int(np.argmax(recognizer(r))) == NODULE_CLASS]
    raise ValueError(f"unknown filtration mode {mode!r}")


def encode_patient_features(records):
    counts = [0] * FEATURE_COUNT
    for r in records:
        counts[volume_bin(r.volume_mm3)] += 1
        if r.texture is None:
            raise InvalidInputError(f"nodule {r.nodule_id!r} has no texture")
        counts[3 + int(r.texture)] += 1
    return PatientFeatures(tuple(counts))


def group_by_patient(records, patients=None):
    """Map patient id -> records, keeping patients listed in ``patients`` even if empty."""
    out = {p: [] for p in (patients or [])}
    for r in records:
        out.setdefault(r.patient_id, []).append(r)
    return out


def followup_rule(features):
    """Synthetic follow-up class from the six counts.

    3: any large nodule, or a medium nodule together with any non-solid one
    2: any medium nodule, or more than one nodule
    1: a single small nodule
    0: no nodules
    """
    f = features
    if f.total == 0:
        return 0
    if f.n_large > 0 or (f.n_medium > 0 and f.n_non_solid > 0):
        return 3
    if f.n_medium > 0 or f.total > 1:
        return 2
    return 1


def synthetic_fleischner_label(records):
    return followup_rule(encode_patient_features(records))


def synthetic_patients(n_patients, seed=0, id_prefix="P"):
    """Random ground-truth records for ``n_patients`` (some with no nodules)."""
    rng = np.random.default_rng(seed)
    records, patients = [], []
    for i in range(n_patients):
        pid = f"{id_prefix}{i:05d}"
        patients.append(pid)
        n = int(rng.choice(5, p=[0.15, 0.35, 0.25, 0.15, 0.10]))
        for j in range(n):
            vol = float(np.exp(rng.uniform(np.log(20.0), np.log(1000.0))))
            tex = Texture(int(rng.choice(3, p=[0.2, 0.2, 0.6])))
            records.append(NoduleRecord(pid, round(vol, 3), tex, True, "ground_truth", f"{pid}_{j}"))
    return patients, records


# ---------------------------------------------------------------------------
# nodule CSV


def _texture_name(t):
    return "NONE" if t is None else Texture(t).name


def write_nodule_csv(path_or_buf, records):
    own = isinstance(path_or_buf, str) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.patient_id, r.nodule_id, repr(float(r.volume_mm3)),
                        _texture_name(r.texture), int(bool(r.is_nodule))])
    finally:
        if own:
            fh.close()


def read_nodule_csv(path_or_buf, source="ground_truth"):
    own = isinstance(path_or_buf, str) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, newline="", encoding="utf-8") if own else path_or_buf
    try:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise LoadError(f"unexpected nodule CSV header {reader.fieldnames}")
        out = []
        for row in reader:
            tex = row["texture"].strip().upper()
            texture = None if tex == "NONE" else Texture[tex]
            out.append(NoduleRecord(row["patient_id"], float(row["volume_mm3"]), texture,
                                    row["is_nodule"].strip() in ("1", "true", "True"),
                                    source, row["nodule_id"]))
        return out
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------------------
# random forest


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 2
    max_features: int = 2
    seed: int = 0


@dataclass
class DecisionTree:
    """Pre-order node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    hist: np.ndarray  # (n_nodes, n_classes) training-sample counts

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            idx = np.nonzero(inner)[0]
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def predict_proba(self, X):
        h = self.hist[self.apply(X)]
        return h / h.sum(axis=1, keepdims=True)


@dataclass
class ForestModel:
    trees: list
    n_classes: int
    feature_count: int = FEATURE_COUNT
    seed: int = 0


def _gini(counts, total):
    p = counts / total
    return 1.0 - (p * p).sum(axis=-1)


def _best_split(X, y, n_classes, features, min_leaf, max_features):
    """Scan features in the given order; stop once ``max_features`` have been
    looked at and a valid split exists."""
    n = len(y)
    parent = np.bincount(y, minlength=n_classes).astype(np.float64)
    parent_gini = _gini(parent, n)
    best = None
    for seen, f in enumerate(features, start=1):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        onehot = np.eye(n_classes)[y[order]]
        left = np.cumsum(onehot, axis=0)[:-1]
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if valid.any():
            right = parent - left
            g = (n_left * _gini(left, n_left[:, None]) +
                 (n - n_left) * _gini(right, (n - n_left)[:, None])) / n
            g = np.where(valid, g, np.inf)
            i = int(np.argmin(g))
            gain = parent_gini - g[i]
            if best is None or gain > best[0] + 1e-12:
                best = (gain, f, 0.5 * (xs[i] + xs[i + 1]))
        if best is not None and seen >= max_features:
            break
    return best


def _grow_tree(X, y, n_classes, cfg, rng):
    feature, threshold, left, right, hist = [], [], [], [], []

    def build(idx, depth):
        node = len(feature)
        counts = np.bincount(y[idx], minlength=n_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        hist.append(counts)
        if depth >= cfg.max_depth or len(idx) < 2 * cfg.min_leaf or np.count_nonzero(counts) < 2:
            return node
        order = rng.permutation(X.shape[1])
        split = _best_split(X[idx], y[idx], n_classes, order, cfg.min_leaf, cfg.max_features)
        if split is None or split[0] <= 0:
            return node
        _, f, thr = split
        go_left = X[idx, f] <= thr
        feature[node] = int(f)
        threshold[node] = float(thr)
        left[node] = build(idx[go_left], depth + 1)
        right[node] = build(idx[~go_left], depth + 1)
        return node

    build(np.arange(len(y)), 0)
    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(hist, dtype=np.int64))


def _feature_matrix(features, size_only=False):
    rows = [f.as_array(size_only) if isinstance(f, PatientFeatures) else np.asarray(f, float)
            for f in features]
    X = np.array(rows, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("features must be finite")
    return X


def rf_train(features, labels, cfg=None, n_classes=None, size_only=False):
    """Bootstrap-aggregated Gini trees; tree ``i`` draws from RNG ``(seed, i)``."""
    cfg = cfg or ForestConfig()
    X = _feature_matrix(features, size_only)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != len(X):
        raise InvalidInputError("features and labels differ in length")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("need at least two distinct classes to train a forest")
    k = int(n_classes if n_classes is not None else y.max() + 1)
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, t])
        boot = rng.integers(0, len(y), size=len(y))
        trees.append(_grow_tree(X[boot], y[boot], k, cfg, rng))
    return ForestModel(trees, k, X.shape[1], cfg.seed)


def rf_predict_proba(model, features):
    X = _feature_matrix(features)
    if X.shape[1] != model.feature_count:
        raise InvalidInputError(f"expected {model.feature_count} features, got {X.shape[1]}")
    per_tree = np.stack([t.predict_proba(X) for t in model.trees])
    # sorting over the tree axis makes the sum independent of tree order
    return np.sort(per_tree, axis=0).sum(axis=0) / len(model.trees)


def _is_single(features):
    if isinstance(features, PatientFeatures):
        return True
    if len(features) and isinstance(features[0], PatientFeatures):
        return False
    return np.ndim(features) == 1


def rf_predict(model, features):
    """Soft vote.  A single feature vector gives ``(label, probs)``; a batch
    gives ``(labels, probs)`` arrays."""
    single = _is_single(features)
    probs = rf_predict_proba(model, [features] if single else features)
    labels = probs.argmax(axis=1)
    if single:
        return int(labels[0]), probs[0]
    return labels, probs


def forest_to_text(model):
    out = io.StringIO()
    out.write(f"forest n_trees={len(model.trees)} n_classes={model.n_classes} "
              f"feature_count={model.feature_count} seed={model.seed}\n")
    for i, t in enumerate(model.trees):
        out.write(f"tree {i} nodes={len(t.feature)}\n")
        for n in range(len(t.feature)):
            h = ",".join(str(int(c)) for c in t.hist[n])
            out.write(f"{t.feature[n]} {float(t.threshold[n])!r} {t.left[n]} {t.right[n]} {h}\n")
    return out.getvalue()


def forest_from_text(text):
    lines = text.splitlines()
    try:
        head = dict(kv.split("=") for kv in lines[0].split()[1:])
        n_trees, k = int(head["n_trees"]), int(head["n_classes"])
        pos, trees = 1, []
        for _ in range(n_trees):
            n_nodes = int(lines[pos].split("nodes=")[1])
            rows = [ln.split() for ln in lines[pos + 1:pos + 1 + n_nodes]]
            pos += 1 + n_nodes
            trees.append(DecisionTree(
                np.array([int(r[0]) for r in rows], dtype=np.int64),
                np.array([float(r[1]) for r in rows]),
                np.array([int(r[2]) for r in rows], dtype=np.int64),
                np.array([int(r[3]) for r in rows], dtype=np.int64),
                np.array([[int(c) for c in r[4].split(",")] for r in rows], dtype=np.int64)))
    except (IndexError, KeyError, ValueError) as exc:
        raise LoadError(f"malformed forest text: {exc}") from exc
    return ForestModel(trees, k, int(head["feature_count"]), int(head["seed"]))


def save_forest(path, model):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(forest_to_text(model))


def load_forest(path):
    with open(path, encoding="utf-8") as fh:
        return forest_from_text(fh.read())
