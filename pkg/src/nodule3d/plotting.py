"""Report figures written next to the CSV outputs (PNG, headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _series(rows, key):
    steps = [r["step"] for r in rows if r.get(key) is not None and np.isfinite(r[key])]
    vals = [r[key] for r in rows if r.get(key) is not None and np.isfinite(r[key])]
    return np.asarray(steps), np.asarray(vals, dtype=float)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(rows, path, gate_threshold=0.45):
    """Loss terms on the left, IoU / accuracy on the right; the gate latch is marked."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(9, 3.4))
        for key, label in (("dice", "soft Dice"), ("ce", "weighted CE")):
            s, v = _series(rows, key)
            if len(s):
                ax_l.plot(s, v, lw=1, label=label)
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("loss")
        ax_l.legend()

        for key, label, style in (("ema_iou", "EMA batch IoU", "-"),
                                  ("val_iou", "eval IoU", "o-"), ("val_acc", "eval accuracy", "s-")):
            s, v = _series(rows, key)
            if len(s):
                ax_r.plot(s, v, style, lw=1, ms=3, label=label)
        ax_r.axhline(gate_threshold, color="0.5", ls=":", lw=1)
        latched = [r["step"] for r in rows if r.get("gate") == 1]
        if latched and any(r.get("gate") == 0 for r in rows):
            ax_r.axvline(latched[0], color="C3", ls="--", lw=1, label="gate opens")
        ax_r.set_ylim(0, 1.02)
        ax_r.set_xlabel("step")
        ax_r.legend(loc="lower right")
        return _save(fig, path)


def confusion_figure(cm, labels, path, title="texture"):
    cm = np.asarray(cm)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        ax.imshow(cm, cmap="Blues")
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center",
                    color="white" if v > cm.max() / 2 else "black")
        ax.set_xticks(range(len(labels)), labels)
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("truth")
        ax.set_title(title)
        return _save(fig, path)


def eval_figure(result, path):
    """Predicted vs reference volume and the per-case Jaccard distribution."""
    with plt.rc_context(STYLE):
        fig, (ax_v, ax_j) = plt.subplots(1, 2, figsize=(8, 3.4))
        vp, vg = result.pred_volumes, result.gt_volumes
        ax_v.scatter(vg, vp, s=10, alpha=0.7)
        hi = max(vp.max(initial=0), vg.max(initial=0)) * 1.05 or 1.0
        ax_v.plot([0, hi], [0, hi], color="0.5", lw=1, ls=":")
        ax_v.set_xlabel("reference volume (mm$^3$)")
        ax_v.set_ylabel("predicted volume (mm$^3$)")

        j = np.array([r["jaccard"] for r in result.rows])
        ax_j.hist(j, bins=np.linspace(0, 1, 21), color="C2")
        ax_j.axvline(j.mean(), color="k", lw=1, ls="--")
        ax_j.set_xlabel("Jaccard per case")
        ax_j.set_ylabel("cases")
        return _save(fig, path)


def augmentation_comparison(curves, path):
    """``curves``: label -> log rows; eval IoU against step for each run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label, rows in curves.items():
            s, v = _series(rows, "val_iou")
            ax.plot(s, v, "o-", ms=3, lw=1, label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("held-out IoU")
        ax.legend()
        return _save(fig, path)
