"""Segmentation and classification losses, and the IoU gate on the CE term."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import (DegenerateDataError, InvalidConfigError, InvalidLabelError,
                     InvalidShapeError)
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    ce_weight: float = 0.2
    gate_iou_threshold: float = 0.45
    gate_ema_decay: float = 0.9
    dice_eps: float = 1e-6
    # "average": 0.5*dice + 0.5*ce_weight*ce;  "sum": dice + ce_weight*ce
    combine: str = "average"
    class_weights: list = field(default_factory=list)

    def validate(self):
        if self.ce_weight <= 0:
            raise InvalidConfigError("ce_weight must be positive")
        if not 0 < self.gate_iou_threshold < 1:
            raise InvalidConfigError("gate_iou_threshold must lie in (0, 1)")
        if not 0 <= self.gate_ema_decay < 1:
            raise InvalidConfigError("gate_ema_decay must lie in [0, 1)")
        if self.combine not in ("average", "sum"):
            raise InvalidConfigError(f"unknown combine mode {self.combine!r}")
        w = np.asarray(self.class_weights, dtype=float)
        if w.size and (not np.all(np.isfinite(w)) or np.any(w <= 0)):
            raise InvalidConfigError("class weights must be finite and positive")
        return self


@dataclass(frozen=True)
class GateState:
    ema_iou: float = 0.0
    latched: bool = False


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def soft_dice_loss(pred, target, eps=1e-6):
    """Mean over the batch of 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    t = _array(target).astype(pred.dtype, copy=False)
    if t.shape != pred.shape:
        raise InvalidShapeError(f"prediction {pred.shape} and target {t.shape} differ")
    n = pred.shape[0]
    p = pred.data.reshape(n, -1)
    tf = t.reshape(n, -1)
    inter = (p * tf).sum(axis=1)
    denom = p.sum(axis=1) + tf.sum(axis=1) + eps
    numer = 2 * inter + eps
    loss = np.asarray(np.mean(1 - numer / denom), dtype=pred.dtype).reshape(())

    def back(g):
        d = -(2 * tf * denom[:, None] - numer[:, None]) / (denom[:, None] ** 2)
        return ((g / n) * d).reshape(pred.shape).astype(pred.dtype, copy=False),

    return T.emit_op("soft_dice_loss", loss, (pred,), back)


def inverse_frequency_weights(class_counts):
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise DegenerateDataError("need a non-empty vector of class counts")
    if np.any(counts <= 0):
        raise DegenerateDataError(f"every class needs at least one sample, got counts {class_counts}")
    return counts.sum() / (counts.size * counts)


def _check_labels(labels, n, k):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise InvalidShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise InvalidLabelError("labels must be integers")
        y = y.astype(np.int64)
    if np.any((y < 0) | (y >= k)):
        raise InvalidLabelError(f"labels must lie in [0, {k})")
    return y


def weighted_cross_entropy(probs, labels, weights=None):
    """-(1/N) * sum_n w[y_n] * log(max(p[n, y_n], 1e-12))."""
    n, k = probs.shape
    y = _check_labels(labels, n, k)
    rows = np.arange(n)
    picked = probs.data[rows, y]
    floored = np.maximum(picked, PROB_FLOOR)
    if weights is None:
        loss = -np.log(floored).sum() / n
        w = np.ones(n, dtype=probs.dtype)
    else:
        wv = np.asarray(weights, dtype=probs.dtype)
        if wv.shape != (k,):
            raise InvalidShapeError(f"expected {k} class weights, got {wv.shape}")
        w = wv[y]
        loss = -(w * np.log(floored)).sum() / n
    loss = np.asarray(loss, dtype=probs.dtype).reshape(())

    def back(g):
        d = np.zeros_like(probs.data)
        live = picked > PROB_FLOOR
        d[rows[live], y[live]] = -w[live] / (n * picked[live])
        return (g * d,)

    return T.emit_op("weighted_cross_entropy", loss, (probs,), back)


def cross_entropy(probs, labels):
    return weighted_cross_entropy(probs, labels, None)


def gate_factor(gate):
    return 1.0 if gate.latched else 0.0


def joint_loss(dice, ce, gate, cfg):
    """Combine the Dice and CE terms; CE only counts once the gate has latched.

    Before that the CE tensor is not touched at all, so nothing in the
    classification head receives a gradient.
    """
    dice_scale = 0.5 if cfg.combine == "average" else 1.0
    if isinstance(dice, Tensor):
        out = T.scale(dice, dice_scale)
        if gate.latched:
            out = T.add(out, T.scale(ce, dice_scale * cfg.ce_weight))
        return out
    return dice_scale * dice + dice_scale * cfg.ce_weight * ce * gate_factor(gate)


def hard_iou(pred_probs, target, prob_threshold=0.5):
    a = _array(pred_probs) >= prob_threshold
    b = _array(target) > 0.5
    if a.shape != b.shape:
        raise InvalidShapeError(f"prediction {a.shape} and target {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def gate_update(state, batch_iou, cfg):
    if not 0 <= batch_iou <= 1:
        raise ValueError(f"batch IoU must lie in [0, 1], got {batch_iou}")
    ema = cfg.gate_ema_decay * state.ema_iou + (1 - cfg.gate_ema_decay) * batch_iou
    return replace(state, ema_iou=float(ema), latched=state.latched or ema >= cfg.gate_iou_threshold)
