"""Training loop for the joint model and the non-nodule recognizer."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from .augment import augment_sample
from .checkpoint import save_checkpoint
from .errors import DegenerateDataError, InvalidShapeError, TrainingError
from .optim import AdamState, adam_step
from .phantom import normalize_intensity

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "dice", "ce", "ema_iou", "gate", "val_iou", "val_acc"]


def derive_seed(*parts):
    """Stable 63-bit seed from integer parts (base seed, step, sample index...)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> 1)


@dataclass
class LoadedSample:
    sample_id: str
    image: np.ndarray  # normalized, (D, H, W)
    mask: np.ndarray
    texture: int  # -1 for non-nodules
    is_nodule: bool


def load_samples(samples, cfg):
    out = []
    e = cfg.patch_extent
    for s in samples:
        hu, mask = s.load()
        if hu.shape != (e, e, e) or mask.shape != hu.shape:
            raise InvalidShapeError(f"{s.sample_id}: expected {e}^3 arrays, got {hu.shape} / {mask.shape}")
        out.append(LoadedSample(s.sample_id, normalize_intensity(hu, cfg.hu_min, cfg.hu_max),
                                (mask > 0.5).astype(np.float32),
                                -1 if s.texture is None else int(s.texture), bool(s.is_nodule)))
    return out


@dataclass
class TrainResult:
    params: dict
    log_rows: list
    best_dir: str | None = None
    last_dir: str | None = None
    best_metrics: dict = field(default_factory=dict)
    steps_run: int = 0


def _class_labels(samples, task):
    if task == "recognizer":
        return np.array([int(s.is_nodule) for s in samples])
    return np.array([s.texture for s in samples])


def class_weights_for(samples, cfg):
    if cfg.loss.class_weights:
        return np.asarray(cfg.loss.class_weights, dtype=np.float64)
    k = 2 if cfg.task == "recognizer" else cfg.model.texture_classes
    labels = _class_labels(samples, cfg.task)
    labels = labels[labels >= 0]
    counts = np.bincount(labels, minlength=k)
    return L.inverse_frequency_weights(counts)


def predict_batch(params, model_cfg, images, task="joint", batch=8):
    """Inference over a list of normalized cubes -> (mask_probs | None, class_probs)."""
    masks, probs = [], []
    for i in range(0, len(images), batch):
        x = T.Tensor(np.stack(images[i:i + batch])[:, None])
        if task == "recognizer":
            probs.append(M.nonnodule_recognizer_forward(x, params, model_cfg).data)
        else:
            m, c = M.joint_forward(x, params, model_cfg, training=False)
            masks.append(m.data[:, 0])
            probs.append(c.data)
    return (np.concatenate(masks) if masks else None), np.concatenate(probs)


def evaluate(params, cfg, samples):
    """Mean per-sample IoU over nodule samples and classification accuracy."""
    if not samples:
        return float("nan"), float("nan")
    mask_probs, class_probs = predict_batch(params, cfg.model, [s.image for s in samples], cfg.task)
    pred = class_probs.argmax(axis=1)
    if cfg.task == "recognizer":
        truth = np.array([int(s.is_nodule) for s in samples])
        return float("nan"), float(np.mean(pred == truth))
    nod = [i for i, s in enumerate(samples) if s.is_nodule]
    if not nod:
        return float("nan"), float("nan")
    ious = [L.hard_iou(mask_probs[i], samples[i].mask) for i in nod]
    acc = float(np.mean([pred[i] == samples[i].texture for i in nod]))
    return float(np.mean(ious)), acc


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in LOG_COLUMNS])


def _dump_batch(out_dir, step, batch_seed, x, y):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, f"nonfinite_step{step}.npz")
    np.savez(path, x=x, y=y, batch_seed=batch_seed)
    return path


def train(cfg, manifest, out_dir=None, init=None, callback=None):
    """Run the training loop; returns a :class:`TrainResult`.

    ``init`` optionally supplies starting parameters (e.g. a recognizer
    initialized from a joint checkpoint).  ``callback(step, params, row)``
    runs after every optimizer step.
    """
    cfg.validate()
    train_samples = load_samples(manifest.split("train"), cfg)
    if not train_samples:
        raise DegenerateDataError("manifest has no training samples")
    eval_samples = train_samples if cfg.eval_on == "train" else load_samples(manifest.split("val"), cfg)
    weights = class_weights_for(train_samples, cfg)
    task = cfg.task
    mcfg = M.recognizer_config(cfg.model) if task == "recognizer" else cfg.model

    if init is not None:
        params = init
    elif task == "recognizer":
        params = M.init_params(mcfg, cfg.seed, decoder=False)
    else:
        params = M.init_params(mcfg, cfg.seed)
    trainable = [k for k in params
                 if not (cfg.freeze_encoder and k.startswith(("stem.", "enc.")))]
    opt = AdamState(lr=cfg.lr)
    gate = L.GateState(latched=task == "recognizer")
    order_rng = np.random.default_rng([cfg.seed, 1])
    queue = []

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rows, best_score, best_metrics = [], -np.inf, {}
    best_dir = os.path.join(out_dir, "checkpoint_best") if out_dir else None
    steps_run = 0

    for step in range(1, cfg.max_steps + 1):
        if len(queue) < cfg.batch_size:
            queue.extend(order_rng.permutation(len(train_samples)).tolist())
        idx, queue = queue[:cfg.batch_size], queue[cfg.batch_size:]
        xs, ys = [], []
        for i in idx:
            s = train_samples[i]
            img, msk = augment_sample(s.image, s.mask, cfg.augment, derive_seed(cfg.seed, step, i))
            xs.append(img)
            ys.append(msk)
        x = T.Tensor(np.stack(xs)[:, None])
        y = np.stack(ys)[:, None]
        batch = [train_samples[i] for i in idx]
        batch_seed = derive_seed(cfg.seed, step, 2 ** 31 - 1)

        row = {"step": step}
        with T.Tape() as tape:
            if task == "recognizer":
                probs = M.nonnodule_recognizer_forward(x, params, mcfg, training=True, seed=batch_seed)
                ce = L.weighted_cross_entropy(probs, [int(s.is_nodule) for s in batch], weights)
                loss = ce
                row.update(dice=None, ce=ce.item(), ema_iou=None, gate=1)
            else:
                mask_probs, class_probs = M.joint_forward(x, params, mcfg, training=True, seed=batch_seed)
                dice = L.soft_dice_loss(mask_probs, y, cfg.loss.dice_eps)
                nod = [j for j, s in enumerate(batch) if s.is_nodule]
                ce = None
                if nod:
                    ious = [L.hard_iou(mask_probs.data[j], y[j]) for j in nod]
                    gate = L.gate_update(gate, float(np.mean(ious)), cfg.loss)
                    ce = L.weighted_cross_entropy(T.select_rows(class_probs, nod),
                                                  [batch[j].texture for j in nod], weights)
                use_ce = ce is not None and gate.latched
                loss = L.joint_loss(dice, ce, gate if use_ce else L.GateState(gate.ema_iou, False), cfg.loss)
                row.update(dice=dice.item(), ce=None if ce is None else ce.item(),
                           ema_iou=gate.ema_iou, gate=int(gate.latched))

        if not np.isfinite(loss.item()):
            dump = _dump_batch(out_dir, step, batch_seed, x.data, y)
            raise TrainingError(f"non-finite loss at step {step} (batch seed {batch_seed})",
                                batch_seed=batch_seed, dump_path=dump)
        T.backward(tape, loss)
        del tape
        adam_step(params, {k: params[k].grad for k in trainable}, opt)
        for p in params.values():
            p.grad = None
        steps_run = step

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            v_iou, v_acc = evaluate(params, cfg, eval_samples)
            row.update(val_iou=v_iou, val_acc=v_acc)
            score = np.nan_to_num(v_iou) + np.nan_to_num(v_acc)
            log.info("step %d dice=%s ce=%s ema_iou=%s gate=%s val_iou=%.4f val_acc=%.4f",
                     step, row.get("dice"), row.get("ce"), row.get("ema_iou"), row.get("gate"),
                     v_iou, v_acc)
            if score > best_score:
                best_score = score
                best_metrics = {"val_iou": v_iou, "val_acc": v_acc, "step": step}
                if best_dir:
                    save_checkpoint(best_dir, params, mcfg, step,
                                    {"val_iou": v_iou, "val_acc": v_acc}, kind=task)
        rows.append(row)
        if callback is not None:
            callback(step, params, row)
        if "val_iou" in row and _reached(cfg, row):
            break

    last_dir = None
    if out_dir:
        last_dir = save_checkpoint(os.path.join(out_dir, "checkpoint_last"), params, mcfg, steps_run,
                                   {}, kind=task)
        write_log(os.path.join(out_dir, "train_log.csv"), rows)
    return TrainResult(params, rows, best_dir, last_dir, best_metrics, steps_run)


def _reached(cfg, row):
    if cfg.early_stop_iou <= 0 and cfg.early_stop_acc <= 0:
        return False
    iou_ok = cfg.task == "recognizer" or row["val_iou"] >= cfg.early_stop_iou
    return iou_ok and row["val_acc"] >= cfg.early_stop_acc
