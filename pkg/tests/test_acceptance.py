"""Acceptance criteria 1-9.

Each test prints one ``CRITERION n: PASS|FAIL`` line with the measured
numbers; the lines are repeated in the pytest terminal summary.  The whole
module takes roughly half an hour on one CPU core.  Run it on its own with
``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import filecmp
import hashlib
import os
import time

import numpy as np
import pytest

import oracles
from nodule3d import fleischner as F
from nodule3d import kernels as K
from nodule3d import metrics as MT
from nodule3d import model as M
from nodule3d import tensor as T
from nodule3d.augment import AugmentConfig
from nodule3d.config import RunConfig
from nodule3d.gradcheck import run_gradcheck
from nodule3d.losses import hard_iou
from nodule3d.phantom import DatasetManifest, PhantomConfig, generate_phantom_dataset
from nodule3d.training import load_samples, predict_batch, train

RESULTS = []

# pinned tolerances and budgets
GRAD_TOL = 1e-4
GRAD_TRIALS = 20
GRAD_BUDGET_S = 300
ORACLE_TOL = {np.float32: 1e-5, np.float64: 1e-10}
ORACLE_SHAPES = 50
GATE_IOU = 0.45
OVERFIT_IOU, OVERFIT_ACC, OVERFIT_STEPS, OVERFIT_BUDGET_S = 0.9, 1.0, 2000, 30 * 60
HELDOUT_IOU, HELDOUT_BACC = 0.6, 0.8
MULTITASK_PATIENTS, MULTITASK_STEPS = 200, 1500
FOREST_BACC, FOREST_PATIENTS = 0.9, 500
METRIC_PAIRS, METRIC_MAX_SIDE, DIST_TOL = 100, 16, 1e-9
TABLE2 = [
    (0.4779, 0.4203, 2.0275, 0.055, 44.2826, 86.3227),
    (0.468, 0.4686, 2.1371, 0.081, 40.701, 98.741),
    (0.4447, 0.4115, 2.0618, 0.1452, 41.4341, 129.47),
]


def verdict(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    RESULTS.append(line)
    assert ok, line


# ---------------------------------------------------------------- 1


@pytest.mark.slow
def test_criterion_1_gradient_suite():
    report = run_gradcheck("all", trials=GRAD_TRIALS, seed=0, tolerance=GRAD_TOL)
    print(report.format())
    names = {r.name for r in report.ops}
    worst = max(r.max_rel_error for r in report.ops)
    ok = (report.passed and report.seconds < GRAD_BUDGET_S
          and all(r.trials >= GRAD_TRIALS for r in report.ops)
          and {"residual_block", "cbam3d", "joint_model"} <= names)
    verdict(1, ok, f"{len(report.ops)} cases, failures={report.failures}, max rel err {worst:.2e} "
                   f"(< {GRAD_TOL:g}), {report.seconds:.0f}s (< {GRAD_BUDGET_S}s)")


# ---------------------------------------------------------------- 2


def _random_case(kind, rng, dtype):
    def arr(*shape):
        return rng.normal(size=shape).astype(dtype)

    if kind == "conv3d":
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, k))
        ext = [int(rng.integers(k, 6)) for _ in range(3)]
        ext = [e + (e + 2 * pad - k) % stride for e in ext]  # stride divides the padded span
        x = arr(int(rng.integers(1, 3)), int(rng.integers(1, 4)), *ext)
        w = arr(int(rng.integers(1, 4)), x.shape[1], k, k, k)
        b = arr(w.shape[0])
        ours, _ = K.conv3d_forward(x, w, b, stride, pad)
        return ours, oracles.conv3d(x, w, b, stride, pad)
    if kind == "maxpool":
        x = arr(int(rng.integers(1, 3)), int(rng.integers(1, 4)), *(2 * rng.integers(1, 4, size=3)))
        return T.maxpool3d_2x(T.Tensor(x)).data, oracles.maxpool2x(x)
    if kind == "group_norm":
        groups = int(rng.choice([1, 2, 4]))
        c = groups * int(rng.integers(1, 4))
        x = arr(int(rng.integers(1, 3)), c, *rng.integers(1, 5, size=3))
        gamma, beta = arr(c), arr(c)
        ours = T.group_norm(T.Tensor(x), T.Tensor(gamma), T.Tensor(beta), groups).data
        return ours, oracles.group_norm(x, gamma, beta, groups)
    if kind == "linear":
        x = arr(int(rng.integers(1, 6)), int(rng.integers(1, 9)))
        w = arr(x.shape[1], int(rng.integers(1, 7)))
        b = arr(w.shape[1])
        return T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data, oracles.linear(x, w, b)
    x = (arr(int(rng.integers(1, 6)), int(rng.integers(2, 7))) * 5).astype(dtype)
    return T.softmax(T.Tensor(x)).data, oracles.softmax(x)


def test_criterion_2_kernel_oracles():
    rng = np.random.default_rng(2)
    worst, ok = {}, True
    for kind in ("conv3d", "maxpool", "group_norm", "linear", "softmax"):
        for dtype in (np.float32, np.float64):
            err = 0.0
            for _ in range(ORACLE_SHAPES):
                ours, ref = _random_case(kind, rng, dtype)
                assert ours.dtype == dtype and ours.shape == ref.shape
                err = max(err, float(np.max(np.abs(ours.astype(np.float64) - ref))))
            worst[(kind, dtype.__name__)] = err
            ok &= err <= ORACLE_TOL[dtype]
    shapes = ", ".join(f"{k}/{d[5:]}={e:.1e}" for (k, d), e in worst.items())
    verdict(2, ok, f"{ORACLE_SHAPES} shapes each; max abs err {shapes}")


# ---------------------------------------------------------------- 3


def test_criterion_3_architecture_contract():
    cfg = M.JointModelConfig.paper()
    params = {name: T.Tensor(np.zeros(shape, np.float32))
              for name, (shape, _) in M.parameter_layout(cfg).items()}
    x = T.Tensor(np.zeros((1, 1, 64, 64, 64), np.float32))
    skips, bottleneck = M.encoder_forward(x, params, cfg)
    ladder = [s.shape[1] for s in skips]
    ok = (cfg.base_features == 32 and cfg.stages == 5 and ladder == [32, 64, 128, 256, 512]
          and bottleneck.shape == (1, 512, 2, 2, 2))
    verdict(3, ok, f"ladder {ladder}, bottleneck {bottleneck.shape}")


# ---------------------------------------------------------------- 4 and 5 share one logged run


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    manifest = generate_phantom_dataset(str(root), 6, PhantomConfig(nonnodule_fraction=0.0), seed=0)
    picked, seen = [], set()
    for s in manifest.samples:  # one of each texture first
        if s.texture not in seen:
            picked.append(s)
            seen.add(s.texture)
    picked += [s for s in manifest.samples if s not in picked][:4 - len(picked)]
    for s in picked:
        s.split = "train"
    cfg = RunConfig(model=M.JointModelConfig(base_features=8), augment=AugmentConfig.off(),
                    max_steps=OVERFIT_STEPS, eval_every=25, eval_on="train",
                    early_stop_iou=OVERFIT_IOU, early_stop_acc=OVERFIT_ACC)
    head_hashes = []

    def record(step, params, row):
        blob = b"".join(params[k].data.tobytes() for k in sorted(params) if k.startswith("cls."))
        head_hashes.append((step, row["gate"], row["ema_iou"], hashlib.sha256(blob).hexdigest()))

    start = time.perf_counter()
    result = train(cfg, DatasetManifest(picked, manifest.root), str(root / "run"), callback=record)
    elapsed = time.perf_counter() - start
    init_blob = b"".join(v.data.tobytes() for k, v in sorted(M.init_params(cfg.model, cfg.seed).items())
                         if k.startswith("cls."))
    return result, head_hashes, hashlib.sha256(init_blob).hexdigest(), elapsed


@pytest.mark.slow
def test_criterion_4_gate_contract(overfit_run):
    result, hashes, init_hash, _ = overfit_run
    gates = [g for _, g, _, _ in hashes]
    if 1 not in gates:
        verdict(4, False, "gate never latched")
    first = gates.index(1)
    frozen = all(h == init_hash for _, _, _, h in hashes[:first])
    ema = hashes[first][2]
    moved = hashes[first][3] != init_hash
    ok = first > 0 and frozen and ema >= GATE_IOU and moved and all(gates[first:])
    verdict(4, ok, f"gate opens at step {hashes[first][0]} with ema_iou {ema:.4f} (>= {GATE_IOU}); "
                   f"head bit-identical over the {first} steps before it: {frozen}")


@pytest.mark.slow
def test_criterion_5_overfit(overfit_run):
    result, _, _, elapsed = overfit_run
    best = result.best_metrics
    ok = (best["val_iou"] >= OVERFIT_IOU and best["val_acc"] >= OVERFIT_ACC
          and result.steps_run <= OVERFIT_STEPS and elapsed < OVERFIT_BUDGET_S)
    verdict(5, ok, f"train IoU {best['val_iou']:.4f}, accuracy {best['val_acc']:.2f} at step {best['step']}, "
                   f"{elapsed:.0f}s (< {OVERFIT_BUDGET_S}s)")


# ---------------------------------------------------------------- 6


def _heldout(cfg, manifest):
    result = train(cfg, manifest)
    val = [s for s in load_samples(manifest.split("val"), cfg) if s.is_nodule]
    masks, probs = predict_batch(result.params, cfg.model, [s.image for s in val])
    iou = float(np.mean([hard_iou(masks[i], s.mask) for i, s in enumerate(val)]))
    cm = MT.confusion_matrix([s.texture for s in val], probs.argmax(axis=1), 3)
    return iou, MT.balanced_accuracy(cm), result.log_rows


@pytest.mark.slow
def test_criterion_6_multitask(tmp_path):
    from nodule3d.plotting import augmentation_comparison

    pcfg = PhantomConfig(patch_extent=16, radius_range=(1.5, 4.5), center_jitter=1)
    manifest = generate_phantom_dataset(str(tmp_path), MULTITASK_PATIENTS, pcfg, seed=0)
    n_train = len({s.patient_id for s in manifest.split("train")})

    def cfg(augment):
        return RunConfig(model=M.JointModelConfig(stages=4, base_features=8), patch_extent=16,
                         max_steps=MULTITASK_STEPS, eval_every=250, augment=augment)

    on = _heldout(cfg(AugmentConfig()), manifest)
    off = _heldout(cfg(AugmentConfig.off()), manifest)
    augmentation_comparison({"augmentation on": on[2], "augmentation off": off[2]},
                            str(tmp_path / "augmentation.png"))
    ok = (n_train == round(0.7 * MULTITASK_PATIENTS) and on[0] >= HELDOUT_IOU
          and on[1] >= HELDOUT_BACC and on[0] > off[0])
    verdict(6, ok, f"held-out IoU {on[0]:.4f} (>= {HELDOUT_IOU}), balanced accuracy {on[1]:.4f} "
                   f"(>= {HELDOUT_BACC}); augmentation off: IoU {off[0]:.4f}, balanced accuracy {off[1]:.4f}")


# ---------------------------------------------------------------- 7


def _forest_data(n, seed):
    patients, records = F.synthetic_patients(n, seed=seed, id_prefix=f"S{seed}_")
    groups = F.group_by_patient(records, patients)
    feats = [F.encode_patient_features(groups[p]) for p in patients]
    return feats, np.array([F.synthetic_fleischner_label(groups[p]) for p in patients])


def test_criterion_7_forest():
    train_x, train_y = _forest_data(FOREST_PATIENTS, seed=11)
    test_x, test_y = _forest_data(FOREST_PATIENTS, seed=12)
    cfg = F.ForestConfig(seed=7)
    forest = F.rf_train(train_x, train_y, cfg, n_classes=4)
    pred, probs = F.rf_predict(forest, test_x)
    bacc = MT.balanced_accuracy(MT.confusion_matrix(test_y, pred, 4))
    again = F.rf_train(train_x, train_y, cfg, n_classes=4)
    same = (F.forest_to_text(again) == F.forest_to_text(forest)
            and F.rf_predict(again, test_x)[1].tobytes() == probs.tobytes())
    verdict(7, bacc > FOREST_BACC and same,
            f"out-of-sample balanced accuracy {bacc:.4f} (> {FOREST_BACC}) on {FOREST_PATIENTS} "
            f"unseen patients after training on {FOREST_PATIENTS}; deterministic: {same}")


# ---------------------------------------------------------------- 8


def test_criterion_8_metrics():
    rng = np.random.default_rng(8)
    j_exact, dist_err = True, 0.0
    for _ in range(METRIC_PAIRS):
        shape = tuple(int(s) for s in rng.integers(2, METRIC_MAX_SIDE + 1, size=3))
        density = rng.uniform(0.02, 0.5)
        a, b = rng.random(shape) < density, rng.random(shape) < density
        a.flat[rng.integers(a.size)] = b.flat[rng.integers(b.size)] = True
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        j_exact &= MT.jaccard(a, b) == oracles.jaccard(a, b)
        dist_err = max(dist_err,
                       abs(MT.mean_avg_surface_distance(a, b, spacing) - oracles.mad_pairwise(a, b, spacing)),
                       abs(MT.hausdorff_distance(a, b, spacing) - oracles.hausdorff_pairwise(a, b, spacing)))
    kappa = MT.fleiss_cohen_weighted_kappa([[2, 1], [1, 2]])
    diag = all(MT.fleiss_cohen_weighted_kappa(np.diag(rng.integers(1, 20, size=k))) == 1.0 for k in (2, 3, 5))
    scores = MT.leaderboard_score([MT.SegmentationScores(*r) for r in TABLE2])
    ok = j_exact and dist_err <= DIST_TOL and abs(kappa - 1 / 3) < 1e-15 and diag and np.argmin(scores) == 0
    verdict(8, ok, f"jaccard exact on {METRIC_PAIRS} pairs: {j_exact}; max distance err {dist_err:.1e} mm; "
                   f"kappa {kappa:.6f}; diagonal kappa 1: {diag}; "
                   f"Table 2 scores {np.round(scores, 4).tolist()}")


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path):
    pcfg = PhantomConfig(patch_extent=16, radius_range=(1.5, 4.5), center_jitter=1)
    manifest = generate_phantom_dataset(str(tmp_path / "data"), 8, pcfg, seed=3)
    cfg = RunConfig(model=M.JointModelConfig(stages=4, base_features=8), patch_extent=16,
                    max_steps=30, eval_every=10, seed=5)
    for run in ("a", "b"):
        train(cfg, manifest, str(tmp_path / run))
    diffs = []
    for sub in ("checkpoint_best", "checkpoint_last"):
        names = sorted(os.listdir(tmp_path / "a" / sub))
        assert names == sorted(os.listdir(tmp_path / "b" / sub))
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, names, shallow=False)
        diffs += mismatch + errors
    log_same = filecmp.cmp(tmp_path / "a/train_log.csv", tmp_path / "b/train_log.csv", shallow=False)
    n_files = len(os.listdir(tmp_path / "a/checkpoint_last"))
    verdict(9, not diffs and log_same,
            f"{n_files} checkpoint files per directory, differing: {diffs or 'none'}; logs identical: {log_same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
