import filecmp
import os

import numpy as np
import pytest

from nodule3d import fleischner as F
from nodule3d import kernels as K
from nodule3d import losses as L
from nodule3d.checkpoint import load_checkpoint, save_checkpoint
from nodule3d.cli import main
from nodule3d.config import RunConfig, config_to_text, load_config, parse_config_text
from nodule3d.errors import (InvalidConfigError, InvalidShapeError, LoadError, MissingModelError,
                             TrainingError)
from nodule3d.gradcheck import run_gradcheck
from nodule3d.inference import (EVAL_COLUMNS, evaluate_predictions, fleischner_pipeline, ground_truth_masks,
                                manifest_cases, predict, read_predictions, write_eval_csv)
from nodule3d.model import JointModelConfig, init_params
from nodule3d.phantom import (PhantomConfig, generate_phantom_dataset, load_manifest, make_candidate,
                              normalize_intensity)
from nodule3d.training import derive_seed, train

TINY_PHANTOM = PhantomConfig(patch_extent=8, radius_range=(1.5, 3.0), center_jitter=1)


def tiny_cfg(**kw):
    cfg = RunConfig(model=JointModelConfig(stages=2, base_features=4, groups=4),
                    patch_extent=8, max_steps=6, eval_every=3, batch_size=2, lr=1e-3)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return root, generate_phantom_dataset(str(root), 12, TINY_PHANTOM, seed=1)


# ---------------------------------------------------------------- phantoms


def test_phantom_determinism(tmp_path):
    a = generate_phantom_dataset(str(tmp_path / "a"), 3, TINY_PHANTOM, seed=5)
    generate_phantom_dataset(str(tmp_path / "b"), 3, TINY_PHANTOM, seed=5)
    files = ["manifest.csv", "nodules_gt.csv", "patients.txt"]
    files += [os.path.relpath(p, a.root) for s in a.samples for p in (s.volume_path, s.mask_path)]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors
    for s in a.samples:
        img, mask = s.load()
        assert img.shape == mask.shape == (8, 8, 8)
        assert mask.any() == s.is_nodule and (s.texture is None) != s.is_nodule


def test_phantom_intensity_ordering():
    rng = np.random.default_rng(0)
    cfg = PhantomConfig(vessel_prob=0.0)
    means = {t: [] for t in F.Texture}
    for i in range(100):
        t = F.Texture(i % 3)
        img, mask = make_candidate(rng, cfg, True, t)
        means[t].append(img[mask > 0].mean())
    m = {t: np.mean(v) for t, v in means.items()}
    assert m[F.Texture.SOLID] > m[F.Texture.PARTSOLID] > m[F.Texture.GGO]


def test_normalization_window():
    np.testing.assert_allclose(normalize_intensity(np.array([-2000.0, -1000.0, -300.0, 400.0, 900.0])),
                               [0, 0, 0.5, 1, 1])


def test_manifest_missing_file(tiny_data, tmp_path):
    root, manifest = tiny_data
    text = open(os.path.join(root, "manifest.csv")).read().replace("cases/", "gone/")
    (tmp_path / "manifest.csv").write_text(text)
    with pytest.raises(LoadError):
        load_manifest(str(tmp_path / "manifest.csv"))


# ---------------------------------------------------------------- config / checkpoint


def test_config_parsing(tmp_path):
    text = "# run\nlr = 0.002\nmodel.base_features=16  # wider\naugment.flip_prob=0.25\nspacing_mm=0.5,0.5,1\n"
    cfg = parse_config_text(text)
    assert cfg.lr == 0.002 and cfg.model.base_features == 16 and cfg.augment.flip_prob == 0.25
    assert cfg.spacing_mm == (0.5, 0.5, 1.0)
    (tmp_path / "c.txt").write_text(config_to_text(cfg), encoding="utf-8")
    assert load_config(tmp_path / "c.txt") == cfg
    for bad in ("nope=1", "model.nope=3", "lr", "lr=fast", "model=3"):
        with pytest.raises(InvalidConfigError):
            parse_config_text(bad)
    with pytest.raises(InvalidConfigError):
        RunConfig(patch_extent=24).validate()


def test_checkpoint_roundtrip_and_overwrite(tmp_path):
    cfg = JointModelConfig(stages=2, base_features=4, groups=4)
    params = init_params(cfg, 0)
    path = tmp_path / "ck"
    save_checkpoint(path, params, cfg, step=7, metrics={"val_iou": 0.5})
    save_checkpoint(path, init_params(cfg, 1), cfg, step=8)
    assert sorted(os.listdir(tmp_path)) == ["ck"]
    loaded, cfg2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta["step"] == "8" and "metric.val_iou" not in meta
    assert list(loaded) == list(params)
    assert loaded["stem.weight"].data.tobytes() == init_params(cfg, 1)["stem.weight"].data.tobytes()
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing")


# ---------------------------------------------------------------- training


def test_derive_seed_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    assert 0 <= derive_seed(2 ** 40, 5) < 2 ** 63


def test_training_determinism_and_artifacts(tiny_data, tmp_path):
    _, manifest = tiny_data
    a = train(tiny_cfg(), manifest, str(tmp_path / "a"))
    b = train(tiny_cfg(), manifest, str(tmp_path / "b"))
    assert a.steps_run == 6 and a.log_rows == b.log_rows
    assert open(tmp_path / "a/train_log.csv").read() == open(tmp_path / "b/train_log.csv").read()
    header = open(tmp_path / "a/train_log.csv").readline().strip()
    assert header == "step,dice,ce,ema_iou,gate,val_iou,val_acc"
    for d in ("checkpoint_best", "checkpoint_last"):
        cmp = filecmp.dircmp(tmp_path / "a" / d, tmp_path / "b" / d)
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert "val_iou" in a.log_rows[2] and "val_iou" not in a.log_rows[0]


def test_classification_head_frozen_until_gate(tiny_data):
    _, manifest = tiny_data
    cfg = tiny_cfg(max_steps=8, augment=tiny_cfg().augment.off())
    cfg.loss.gate_iou_threshold = 0.99  # keep the gate shut
    start = {k: v.data.tobytes() for k, v in init_params(cfg.model, cfg.seed).items() if k.startswith("cls.")}
    seen = []

    def check(step, params, row):
        assert row["gate"] == 0
        seen.append(all(params[k].data.tobytes() == v for k, v in start.items()))

    train(cfg, manifest, callback=check)
    assert seen and all(seen)


def test_gate_log_consistency(tiny_data):
    _, manifest = tiny_data
    cfg = tiny_cfg(max_steps=10, lr=3e-3)
    cfg.loss.gate_iou_threshold = 0.05
    rows = train(cfg, manifest).log_rows
    gates = [r["gate"] for r in rows]
    assert gates == sorted(gates)
    if 1 in gates:
        first = rows[gates.index(1)]
        assert first["ema_iou"] >= cfg.loss.gate_iou_threshold


def test_nonfinite_loss_aborts_with_dump(tiny_data, tmp_path, monkeypatch):
    _, manifest = tiny_data
    real = L.soft_dice_loss

    def poisoned(pred, target, eps=1e-6):
        out = real(pred, target, eps)
        out.data = np.asarray(np.nan, dtype=out.data.dtype)
        return out

    monkeypatch.setattr(L, "soft_dice_loss", poisoned)
    with pytest.raises(TrainingError) as info:
        train(tiny_cfg(), manifest, str(tmp_path))
    assert info.value.batch_seed == derive_seed(0, 1, 2 ** 31 - 1)
    assert os.path.exists(info.value.dump_path)


def test_training_rejects_wrong_extent(tiny_data):
    _, manifest = tiny_data
    with pytest.raises(InvalidShapeError):
        train(tiny_cfg(patch_extent=16), manifest)


# ---------------------------------------------------------------- predict / eval / pipeline


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    _, manifest = tiny_data
    out = tmp_path_factory.mktemp("run")
    train(tiny_cfg(max_steps=4), manifest, str(out))
    return os.path.join(out, "checkpoint_last")


def test_predict_outputs(tiny_data, trained, tmp_path):
    _, manifest = tiny_data
    cases = manifest_cases(manifest, "val")
    preds, kept = predict(trained, cases, tiny_cfg(), str(tmp_path))
    assert len(preds) == len(cases)
    for p in preds:
        assert set(np.unique(p.mask)) <= {0, 1}
        assert p.class_probs.sum() == pytest.approx(1, abs=1e-5)
        assert p.kept == (np.count_nonzero(p.mask) >= 8)
    back = read_predictions(str(tmp_path / "predictions.csv"))
    assert [p.sample_id for p in back] == [p.sample_id for p in preds]
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(back, preds))
    assert len(F.read_nodule_csv(str(tmp_path / "nodules_pred.csv"))) == len(kept)


def test_predict_errors(tiny_data, trained):
    _, manifest = tiny_data
    with pytest.raises(LoadError):
        predict(trained, [("x", "P", np.zeros((6, 6, 6)))], tiny_cfg())
    with pytest.raises(MissingModelError):
        predict(trained, manifest_cases(manifest, "val")[:1], tiny_cfg(filter_mode="classifier"))


def test_evaluate_predictions(tiny_data, trained, tmp_path):
    _, manifest = tiny_data
    preds, _ = predict(trained, manifest_cases(manifest), tiny_cfg())
    truths = ground_truth_masks(manifest)
    # replace predictions with ground truth: every agreement metric is perfect
    for p in preds:
        mask, tex = truths[p.sample_id]
        p.mask = mask.astype(np.uint8)
        if tex is not None:
            p.texture = tex
    result = evaluate_predictions(preds, truths)
    n_nodules = sum(1 for s in manifest.samples if s.is_nodule)
    assert len(result.rows) == n_nodules
    s = result.summary
    assert s["jaccard"] == 1 and s["mad_mm"] == 0 and s["hd_mm"] == 0
    assert s["bias_mm3"] == 0 and s["kappa"] == 1 and s["balanced_accuracy"] == 1
    write_eval_csv(tmp_path / "eval.csv", result)
    lines = open(tmp_path / "eval.csv").read().splitlines()
    assert lines[0].split(",") == EVAL_COLUMNS and lines[-1].startswith("summary,")
    assert len(lines) == n_nodules + 2


def test_fleischner_pipeline():
    patients, records = F.synthetic_patients(200, seed=2)
    groups = F.group_by_patient(records, patients)
    feats = [F.encode_patient_features(groups[p]) for p in patients]
    forest = F.rf_train(feats, [F.followup_rule(f) for f in feats], F.ForestConfig(n_trees=10), n_classes=4)
    ids, labels, probs = fleischner_pipeline([], forest, ["Z1", "Z2"])
    assert ids == ["Z1", "Z2"] and labels.tolist() == [0, 0]
    tiny = [F.NoduleRecord("Z1", 0.5, F.Texture.SOLID)]
    ids, labels, _ = fleischner_pipeline(tiny, forest, ["Z1"], filter_mode="volume")
    assert labels.tolist() == [0]
    a = fleischner_pipeline(records, forest, patients)
    b = fleischner_pipeline(records, forest, patients)
    assert a[2].tobytes() == b[2].tobytes()
    with pytest.raises(MissingModelError):
        fleischner_pipeline(records, None)


# ---------------------------------------------------------------- gradcheck negative control


def test_gradcheck_flags_corrupt_conv_backward(monkeypatch):
    ok = run_gradcheck("ops", trials=2, only={"conv3d", "sigmoid"})
    assert ok.passed
    real = K.conv3d_backward

    def corrupt(grad, cache, need_dx=True):
        out = real(grad, cache, need_dx)
        return (out[0] * 1.01 if out[0] is not None else None,) + tuple(out[1:])

    monkeypatch.setattr(K, "conv3d_backward", corrupt)
    bad = run_gradcheck("ops", trials=2, only={"conv3d", "sigmoid"})
    assert not bad.passed and bad.failures == ["conv3d"]
    assert "conv3d" in bad.format() and "FAIL" in bad.format()


# ---------------------------------------------------------------- CLI


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["--bogus"]) == 1
    assert main(["train", "--out", str(tmp_path)]) == 1  # missing --data
    (tmp_path / "bad.txt").write_text("model.base_features=7\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "d")]) == 1
    assert main(["predict", "--checkpoint", str(tmp_path / "nothing"), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "p")]) == 1
    assert main(["fleischner-eval", "--forest", str(tmp_path / "absent.txt"), "--synthetic", "5",
                 "--out", str(tmp_path)]) == 2


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "run.txt"
    cfg.write_text("patch_extent=8\nmodel.stages=2\nmodel.base_features=4\nmodel.groups=4\n"
                   "max_steps=3\neval_every=3\nbatch_size=2\n", encoding="utf-8")
    data, run, pred, ev = (str(tmp_path / d) for d in ("data", "run", "pred", "eval"))
    common = ["--config", str(cfg), "--seed", "1"]
    assert main(["gen-data", *common, "--patients", "12", "--out", data]) == 0
    assert main(["train", *common, "--data", data, "--out", run]) == 0
    assert os.path.exists(os.path.join(run, "train_curves.png"))
    assert main(["predict", *common, "--checkpoint", os.path.join(run, "checkpoint_best"),
                 "--data", data, "--out", pred]) == 0
    assert main(["eval", *common, "--predictions", pred, "--data", data, "--out", ev]) == 0
    for f in ("eval.csv", "eval.png", "confusion.png"):
        assert os.path.exists(os.path.join(ev, f))
    assert main(["fleischner-train", "--synthetic", "300", "--trees", "10", "--out", run]) == 0
    assert main(["fleischner-eval", "--synthetic", "100", "--seed", "9",
                 "--forest", os.path.join(run, "forest.txt"), "--out", ev]) == 0
    last = open(os.path.join(ev, "fleischner_eval.csv")).read().splitlines()[-1]
    assert last.startswith("balanced_accuracy,") and float(last.split(",")[1]) > 0.8
    assert os.path.exists(os.path.join(ev, "fleischner_confusion.png"))
