"""Segmentation agreement and classification agreement metrics."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidShapeError, UndefinedMetricError


@dataclass
class SegmentationScores:
    j_star: float
    mad_mm: float
    hd_mm: float
    c_star: float
    bias_mm3: float
    std_mm3: float

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]


def _binary_pair(a, b):
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise InvalidShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def jaccard(a, b):
    a, b = _binary_pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def surface_voxels(mask, spacing=(1.0, 1.0, 1.0)):
    """Foreground voxels with at least one background 6-neighbour, in mm.

    Voxels outside the array count as background.
    """
    m = np.asarray(mask) > 0
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    surface = m & ~interior
    return np.argwhere(surface).astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _directed(src, dst):
    dist, _ = cKDTree(dst).query(src, k=1)
    return dist


def _surface_pair(a, b, spacing):
    a, b = _binary_pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distances need two non-empty masks")
    return surface_voxels(a, spacing), surface_voxels(b, spacing)


def mean_avg_surface_distance(a, b, spacing=(1.0, 1.0, 1.0)):
    sa, sb = _surface_pair(a, b, spacing)
    total = _directed(sa, sb).sum() + _directed(sb, sa).sum()
    return float(total / (len(sa) + len(sb)))


def hausdorff_distance(a, b, spacing=(1.0, 1.0, 1.0)):
    sa, sb = _surface_pair(a, b, spacing)
    return float(max(_directed(sa, sb).max(), _directed(sb, sa).max()))


def volume_agreement(v_pred, v_gt):
    """Return ``(pearson, bias, std, signed_bias)`` for paired volume lists.

    ``bias`` is the mean absolute difference, ``std`` the sample standard
    deviation of the signed differences.  ``pearson`` is NaN when either
    vector is constant; use :func:`pearson` to get the error instead.
    """
    p = np.asarray(v_pred, dtype=np.float64)
    g = np.asarray(v_gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1:
        raise InvalidShapeError("volume vectors must be 1-D and of equal length")
    if p.size < 2:
        raise UndefinedMetricError("need at least two volumes")
    diff = p - g
    try:
        r = pearson(p, g)
    except UndefinedMetricError:
        r = float("nan")
    return r, float(np.abs(diff).mean()), float(diff.std(ddof=1)), float(diff.mean())


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("correlation is undefined for a constant vector")
    return float((xc * yc).sum() / (sx * sy))


def segmentation_scores(pred_masks, gt_masks, spacing=(1.0, 1.0, 1.0)):
    """Cohort-level six-number summary over paired masks (both non-empty)."""
    j, mad, hd, vp, vg = [], [], [], [], []
    voxel = float(np.prod(spacing))
    for p, g in zip(pred_masks, gt_masks):
        j.append(jaccard(p, g))
        mad.append(mean_avg_surface_distance(p, g, spacing))
        hd.append(hausdorff_distance(p, g, spacing))
        vp.append(np.count_nonzero(p) * voxel)
        vg.append(np.count_nonzero(g) * voxel)
    r, bias, std, _ = volume_agreement(vp, vg)
    return SegmentationScores(1 - float(np.mean(j)), float(np.mean(mad)), float(np.mean(hd)),
                              1 - r, bias, std)


def leaderboard_score(rows):
    """Mean of the six metrics after dividing each column by its maximum.

    Lower is better.  Columns whose maximum is zero contribute zero.
    """
    table = np.array([r.as_array() if isinstance(r, SegmentationScores) else np.asarray(r, float)
                      for r in rows], dtype=np.float64)
    if table.ndim != 2 or table.shape[0] == 0 or table.shape[1] != 6:
        raise InvalidShapeError("need one or more rows of six metrics")
    col_max = table.max(axis=0)
    safe = np.where(col_max > 0, col_max, 1.0)
    norm = np.where(col_max > 0, table / safe, 0.0)
    return norm.mean(axis=1)


# ---------------------------------------------------------------------------
# classification agreement


def confusion_matrix(truth, pred, n_classes):
    """Rows are truth, columns are prediction."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def _square(cm):
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise InvalidShapeError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion matrix counts must be non-negative")
    return cm


def fleiss_cohen_weighted_kappa(cm):
    """Quadratically weighted kappa with agreement weights 1 - ((i-j)/(K-1))^2."""
    cm = _square(cm)
    k = cm.shape[0]
    n = cm.sum()
    if n <= 0:
        raise UndefinedMetricError("kappa needs a non-empty confusion matrix")
    if k < 2:
        raise InvalidShapeError("kappa needs at least two classes")
    i, j = np.indices((k, k))
    w = 1.0 - ((i - j) / (k - 1)) ** 2
    p_o = (w * cm).sum() / n
    p_e = (w * np.outer(cm.sum(axis=1), cm.sum(axis=0))).sum() / n ** 2
    if np.isclose(p_e, 1.0, rtol=0, atol=1e-15):
        return 1.0 if np.isclose(p_o, 1.0, rtol=0, atol=1e-15) else 0.0
    return float((p_o - p_e) / (1 - p_e))


def balanced_accuracy(cm):
    cm = _square(cm)
    support = cm.sum(axis=1)
    if np.any(support == 0):
        raise UndefinedMetricError("every true class needs at least one sample")
    return float(np.mean(np.diag(cm) / support))


def precision(cm_binary, positive_class=1):
    cm = _square(cm_binary)
    predicted = cm[:, positive_class].sum()
    if predicted == 0:
        raise UndefinedMetricError("no predicted positives")
    return float(cm[positive_class, positive_class] / predicted)
