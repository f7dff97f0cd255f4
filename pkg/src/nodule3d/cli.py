"""Command-line entry point: ``nodule3d <command> [options]``.

Exit status is 0 on success, 1 when input or configuration fails validation
(including a failing gradient check) and 2 for any other runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import fleischner as F
from . import metrics as MT
from .config import RunConfig, config_to_text, load_config
from .errors import (DegenerateDataError, InvalidConfigError, InvalidInputError, InvalidLabelError,
                     InvalidShapeError, LoadError, Nodule3DError)
from .phantom import PhantomConfig, generate_phantom_dataset, load_manifest, read_patient_list

log = logging.getLogger("nodule3d")

VALIDATION_ERRORS = (InvalidConfigError, InvalidShapeError, InvalidInputError, InvalidLabelError,
                     LoadError, DegenerateDataError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _manifest_path(data):
    return data if data.endswith(".csv") else os.path.join(data, "manifest.csv")


def cmd_gen_data(args):
    cfg = _run_config(args)
    pcfg = PhantomConfig(patch_extent=cfg.patch_extent, spacing_mm=tuple(cfg.spacing_mm),
                         nonnodule_fraction=args.nonnodule_fraction)
    manifest = generate_phantom_dataset(args.out, args.patients, pcfg, seed=cfg.seed)
    n_train = len(manifest.split("train"))
    print(f"wrote {len(manifest.samples)} candidates ({n_train} train, "
          f"{len(manifest.samples) - n_train} val) to {args.out}")


def cmd_train(args):
    from .checkpoint import load_checkpoint
    from .model import recognizer_config, recognizer_params_from_joint
    from .plotting import training_curves
    from .training import train

    cfg = _run_config(args)
    manifest = load_manifest(_manifest_path(args.data))
    init = None
    if args.init_from:
        if cfg.task != "recognizer":
            raise InvalidConfigError("--init-from is only used with task=recognizer")
        joint, _, _ = load_checkpoint(args.init_from)
        init = recognizer_params_from_joint(joint, recognizer_config(cfg.model), cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
    result = train(cfg, manifest, args.out, init=init)
    training_curves(result.log_rows, os.path.join(args.out, "train_curves.png"),
                    cfg.loss.gate_iou_threshold)
    print(f"{result.steps_run} steps; best {result.best_metrics}; checkpoints in {args.out}")


def cmd_predict(args):
    from .inference import manifest_cases, predict

    cfg = _run_config(args)
    manifest = load_manifest(_manifest_path(args.data))
    cases = manifest_cases(manifest, None if args.split == "all" else args.split)
    preds, kept = predict(args.checkpoint, cases, cfg, args.out, args.recognizer)
    print(f"predicted {len(preds)} candidates, {len(kept)} kept as nodules; wrote {args.out}")


def cmd_eval(args):
    from .inference import evaluate_predictions, ground_truth_masks, read_predictions, write_eval_csv
    from .plotting import confusion_figure, eval_figure

    cfg = _run_config(args)
    pred_csv = args.predictions
    if os.path.isdir(pred_csv):
        pred_csv = os.path.join(pred_csv, "predictions.csv")
    preds = read_predictions(pred_csv)
    truths = ground_truth_masks(load_manifest(_manifest_path(args.data)))
    result = evaluate_predictions(preds, truths, tuple(cfg.spacing_mm))
    os.makedirs(args.out, exist_ok=True)
    write_eval_csv(os.path.join(args.out, "eval.csv"), result)
    eval_figure(result, os.path.join(args.out, "eval.png"))
    confusion_figure(result.confusion, [t.name for t in F.Texture],
                     os.path.join(args.out, "confusion.png"))
    s = result.summary
    print(f"{len(result.rows)} nodules: jaccard {s['jaccard']:.4f}  kappa {s['kappa']:.4f}  "
          f"balanced accuracy {s['balanced_accuracy']:.4f}")


def _load_records(path, patients_file=None):
    records = F.read_nodule_csv(path)
    patients = None
    if patients_file:
        with open(patients_file, encoding="utf-8") as fh:
            patients = [ln.strip() for ln in fh if ln.strip()]
    else:
        patients = read_patient_list(os.path.dirname(os.path.abspath(path)))
    return records, patients


def _labelled_features(records, patients):
    groups = F.group_by_patient([r for r in records if r.is_nodule], patients)
    ids = list(groups)
    feats = [F.encode_patient_features(groups[p]) for p in ids]
    return ids, feats, np.array([F.followup_rule(f) for f in feats])


def cmd_fleischner_train(args):
    if args.synthetic:
        patients, records = F.synthetic_patients(args.synthetic, seed=args.seed or 0)
    elif args.records:
        records, patients = _load_records(args.records, args.patients)
    else:
        raise InvalidInputError("give --records or --synthetic")
    _, feats, labels = _labelled_features(records, patients)
    cfg = F.ForestConfig(n_trees=args.trees, max_depth=args.max_depth, seed=args.seed or 0)
    forest = F.rf_train(feats, labels, cfg, n_classes=4)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "forest.txt")
    F.save_forest(path, forest)
    print(f"trained {cfg.n_trees} trees on {len(labels)} patients; wrote {path}")


def cmd_fleischner_eval(args):
    from .inference import fleischner_pipeline
    from .plotting import confusion_figure

    forest = F.load_forest(args.forest)
    if args.synthetic:
        patients, records = F.synthetic_patients(args.synthetic, seed=args.seed or 0)
        truth = records
    else:
        if not args.records:
            raise InvalidInputError("give --records or --synthetic")
        records, patients = _load_records(args.records, args.patients)
        truth = F.read_nodule_csv(args.truth) if args.truth else records
    ids, predicted, _ = fleischner_pipeline([r for r in records if r.is_nodule], forest, patients)
    ref_ids, _, reference = _labelled_features(truth, patients or ids)
    ref = dict(zip(ref_ids, reference))
    y_true = np.array([ref.get(p, 0) for p in ids])
    cm = MT.confusion_matrix(y_true, predicted, forest.n_classes)
    present = cm.sum(axis=1) > 0
    bacc = float(np.mean(np.diag(cm)[present] / cm.sum(axis=1)[present]))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "fleischner_eval.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "predicted", "reference"])
        w.writerows(zip(ids, predicted.tolist(), y_true.tolist()))
        w.writerow(["balanced_accuracy", f"{bacc:.6f}", ""])
    confusion_figure(cm, [str(k) for k in range(forest.n_classes)],
                     os.path.join(args.out, "fleischner_confusion.png"), title="follow-up class")
    print(f"{len(ids)} patients: balanced accuracy {bacc:.4f} (over classes present)")


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.scope, trials=args.trials, seed=args.seed or 0)
    text = report.format()
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.txt"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0 if report.passed else 1


def build_parser():
    p = _Parser(prog="nodule3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, out_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write a synthetic phantom dataset")
    sp.add_argument("--patients", type=int, default=200)
    sp.add_argument("--nonnodule-fraction", type=float, default=0.2)

    sp = add("train", cmd_train, "train the joint model or the non-nodule recognizer")
    sp.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    sp.add_argument("--init-from", help="joint checkpoint to initialize a recognizer from")

    sp = add("predict", cmd_predict, "segment, classify and filter candidates")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=["train", "val", "all"], default="val")
    sp.add_argument("--recognizer", help="recognizer checkpoint for filter_mode=classifier")

    sp = add("eval", cmd_eval, "score predictions against ground truth")
    sp.add_argument("--predictions", required=True, help="predict output directory or CSV")
    sp.add_argument("--data", required=True)

    for name, fn, help_ in (("fleischner-train", cmd_fleischner_train, "train the follow-up forest"),
                            ("fleischner-eval", cmd_fleischner_eval, "evaluate the follow-up forest")):
        sp = add(name, fn, help_)
        sp.add_argument("--records", help="nodule CSV")
        sp.add_argument("--patients", help="file with one patient id per line")
        sp.add_argument("--synthetic", type=int, help="use N synthetic patients instead")
        if name == "fleischner-train":
            sp.add_argument("--trees", type=int, default=100)
            sp.add_argument("--max-depth", type=int, default=8)
        else:
            sp.add_argument("--forest", required=True)
            sp.add_argument("--truth", help="reference nodule CSV (defaults to --records)")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks", out_required=False)
    sp.add_argument("--scope", choices=["ops", "blocks", "model", "all"], default="all")
    sp.add_argument("--trials", type=int, default=20)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"nodule3d: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except VALIDATION_ERRORS as exc:
        print(f"nodule3d: invalid input: {exc}", file=sys.stderr)
        return 1
    except (Nodule3DError, OSError, ValueError, RuntimeError) as exc:
        print(f"nodule3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
