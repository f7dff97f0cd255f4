"""Prediction, evaluation against ground truth, and the Fleischner pipeline."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import fleischner as F
from . import metrics as MT
from . import ndt
from .checkpoint import load_checkpoint
from .errors import LoadError, MissingModelError, UndefinedMetricError
from .phantom import normalize_intensity
from .training import predict_batch

PRED_THRESHOLD = 0.5
EVAL_COLUMNS = ["case_id", "jaccard", "j_star", "mad_mm", "hd_mm",
                "pearson", "c_star", "bias_mm3", "std_mm3", "kappa", "balanced_accuracy",
                "bias_signed_mm3"]
PRED_COLUMNS = ["sample_id", "patient_id", "mask", "texture", "p_ggo", "p_partsolid", "p_solid",
                "volume_mm3", "kept"]


@dataclass
class CasePrediction:
    sample_id: str
    patient_id: str
    mask: np.ndarray  # binary uint8
    class_probs: np.ndarray
    texture: F.Texture
    volume_mm3: float
    kept: bool = True
    mask_path: str = ""


def load_model(path, task="joint"):
    params, cfg, meta = load_checkpoint(path)
    if meta.get("kind", task) != task:
        raise LoadError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {task!r}")
    return params, cfg


def _check_shapes(volumes, cfg):
    step = 2 ** cfg.stages
    for v in volumes:
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] % step:
            raise LoadError(f"volume shape {v.shape} does not fit a {cfg.stages}-stage model")


def make_recognizer(params, cfg):
    """Return ``record -> [p_non_nodule, p_nodule]`` reading ``record.payload`` (normalized cube)."""
    def recognize(record):
        _, probs = predict_batch(params, cfg, [record.payload], task="recognizer")
        return probs[0]
    return recognize


def predict(checkpoint, cases, run_cfg, out_dir=None, recognizer_checkpoint=None):
    """Segment and classify each case; returns ``(predictions, retained_records)``.

    ``cases`` is a list of ``(sample_id, patient_id, hu_volume)``.  Retained
    records are the candidates that survive non-nodule filtration in
    ``run_cfg.filter_mode``.
    """
    params, cfg = load_model(checkpoint, "joint")
    images = [normalize_intensity(np.asarray(v, np.float32), run_cfg.hu_min, run_cfg.hu_max)
              for _, _, v in cases]
    _check_shapes(images, cfg)
    mask_probs, class_probs = predict_batch(params, cfg, images, "joint") if images else ([], [])

    preds, records = [], []
    for (sid, pid, _), img, mp, cp in zip(cases, images, mask_probs, class_probs):
        mask = (mp >= PRED_THRESHOLD).astype(np.uint8)
        tex = F.Texture(int(np.argmax(cp)))
        vol = F.mask_volume_mm3(mask, run_cfg.spacing_mm)
        preds.append(CasePrediction(sid, pid, mask, cp, tex, vol))
        records.append(F.NoduleRecord(pid, vol, tex, True, "prediction", sid, payload=img))

    recognizer = None
    if run_cfg.filter_mode == "classifier":
        if recognizer_checkpoint is None:
            raise MissingModelError("classifier filtration needs a recognizer checkpoint")
        rparams, rcfg = load_model(recognizer_checkpoint, "recognizer")
        recognizer = make_recognizer(rparams, rcfg)
    kept = F.filter_non_nodules(records, run_cfg.filter_mode, run_cfg.min_volume_voxels,
                                run_cfg.spacing_mm, recognizer)
    kept_ids = {r.nodule_id for r in kept}
    for p in preds:
        p.kept = p.sample_id in kept_ids
    for r in kept:
        r.payload = None

    if out_dir:
        write_predictions(out_dir, preds, kept)
    return preds, kept


def write_predictions(out_dir, preds, kept):
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    with open(os.path.join(out_dir, "predictions.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_COLUMNS)
        for p in preds:
            rel = os.path.join("masks", f"{p.sample_id}_pred.ndt")
            ndt.save(os.path.join(out_dir, rel), p.mask.astype(np.float32))
            p.mask_path = rel
            w.writerow([p.sample_id, p.patient_id, rel, p.texture.name,
                        *[f"{v:.6f}" for v in p.class_probs], f"{p.volume_mm3:.3f}", int(p.kept)])
    F.write_nodule_csv(os.path.join(out_dir, "nodules_pred.csv"), kept)


def read_predictions(path):
    root = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            mask = ndt.load(os.path.join(root, row["mask"])).astype(np.uint8)
            probs = np.array([float(row[c]) for c in ("p_ggo", "p_partsolid", "p_solid")])
            out.append(CasePrediction(row["sample_id"], row["patient_id"], mask, probs,
                                      F.Texture[row["texture"]], float(row["volume_mm3"]),
                                      row["kept"] == "1", row["mask"]))
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSummary:
    rows: list  # per-case dicts keyed by EVAL_COLUMNS
    summary: dict
    confusion: np.ndarray
    pred_volumes: np.ndarray
    gt_volumes: np.ndarray


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return float("nan")


def evaluate_predictions(preds, truths, spacing=(1.0, 1.0, 1.0), n_classes=3):
    """Score predictions against ``truths`` (``sample_id -> (mask, texture)``).

    Only ground-truth nodules (non-empty masks with a texture) are scored.
    Distances are NaN for cases whose predicted mask is empty and are left
    out of the cohort means.
    """
    rows, vp, vg, t_true, t_pred = [], [], [], [], []
    for p in preds:
        if p.sample_id not in truths:
            continue
        gt_mask, texture = truths[p.sample_id]
        if texture is None or not np.any(gt_mask):
            continue
        j = MT.jaccard(p.mask, gt_mask)
        rows.append({"case_id": p.sample_id, "jaccard": j, "j_star": 1 - j,
                     "mad_mm": _safe(MT.mean_avg_surface_distance, p.mask, gt_mask, spacing),
                     "hd_mm": _safe(MT.hausdorff_distance, p.mask, gt_mask, spacing)})
        vp.append(F.mask_volume_mm3(p.mask, spacing))
        vg.append(F.mask_volume_mm3(gt_mask, spacing))
        t_true.append(int(texture))
        t_pred.append(int(p.texture))
    if not rows:
        raise UndefinedMetricError("no ground-truth nodules among the predictions")

    cm = MT.confusion_matrix(t_true, t_pred, n_classes)
    summary = {"case_id": "summary"}
    for c in ("jaccard", "j_star", "mad_mm", "hd_mm"):
        vals = np.array([r[c] for r in rows], dtype=float)
        summary[c] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    if len(vp) >= 2:
        r, bias, std, signed = MT.volume_agreement(vp, vg)
    else:
        r = std = float("nan")
        bias, signed = abs(vp[0] - vg[0]), vp[0] - vg[0]
    summary.update(pearson=r, c_star=1 - r, bias_mm3=bias, std_mm3=std,
                   kappa=_safe(MT.fleiss_cohen_weighted_kappa, cm),
                   balanced_accuracy=_safe(MT.balanced_accuracy, cm),
                   bias_signed_mm3=signed)
    return EvalSummary(rows, summary, cm, np.array(vp), np.array(vg))


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_eval_csv(path, result):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for row in result.rows + [result.summary]:
            w.writerow([_cell(row.get(c)) for c in EVAL_COLUMNS])


# ---------------------------------------------------------------------------
# Fleischner pipeline


def fleischner_pipeline(records, forest, patients=None, filter_mode=None, **filter_kwargs):
    """Records -> per-patient follow-up class, in patient order.

    ``filter_mode`` of None means the records are already filtered.
    Returns ``(patient_ids, labels, probs)``.
    """
    if forest is None:
        raise MissingModelError("the Fleischner pipeline needs a trained forest")
    if filter_mode is not None:
        records = F.filter_non_nodules(records, filter_mode, **filter_kwargs)
    groups = F.group_by_patient(records, patients)
    ids = list(groups)
    feats = [F.encode_patient_features(groups[p]) for p in ids]
    if not feats:
        return [], np.zeros(0, dtype=int), np.zeros((0, forest.n_classes))
    labels, probs = F.rf_predict(forest, feats)
    return ids, labels, probs


def ground_truth_masks(manifest, split=None):
    samples = manifest.samples if split is None else manifest.split(split)
    out = {}
    for s in samples:
        _, mask = s.load()
        out[s.sample_id] = (mask > 0.5, s.texture)
    return out


def manifest_cases(manifest, split=None):
    samples = manifest.samples if split is None else manifest.split(split)
    return [(s.sample_id, s.patient_id, s.load()[0]) for s in samples]

