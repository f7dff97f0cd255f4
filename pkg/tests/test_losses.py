import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodule3d import losses as L
from nodule3d import tensor as T
from nodule3d.errors import DegenerateDataError, InvalidConfigError, InvalidLabelError, InvalidShapeError


def tt(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_dice_examples():
    t = np.zeros((1, 1, 2, 2, 2))
    t[0, 0, 0] = 1
    assert L.soft_dice_loss(tt(t), t).item() == pytest.approx(0.0, abs=1e-6)
    assert L.soft_dice_loss(tt(1 - t), t).item() == pytest.approx(1.0, abs=1e-6)
    half = np.full_like(t, 0.5)
    eps = 1e-6
    expected = 1 - (2 * 2.0 + eps) / (4.0 + 4.0 + eps)
    assert L.soft_dice_loss(tt(half), t, eps).item() == pytest.approx(expected, abs=1e-15)
    with pytest.raises(InvalidShapeError):
        L.soft_dice_loss(tt(half), t[:, :, :1])


def test_dice_is_per_sample_mean():
    t = np.zeros((2, 1, 2, 2, 2))
    t[0, 0, 0, 0, 0] = 1
    t[1, 0] = 1
    p = np.full_like(t, 0.3)
    per = [L.soft_dice_loss(tt(p[i:i + 1]), t[i:i + 1]).item() for i in range(2)]
    assert L.soft_dice_loss(tt(p), t).item() == pytest.approx(np.mean(per), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_dice_range_and_monotone_inside_target(seed):
    rng = np.random.default_rng(seed)
    t = (rng.random((1, 1, 3, 3, 3)) < 0.5).astype(float)
    p = rng.uniform(0.01, 0.99, size=t.shape)
    base = L.soft_dice_loss(tt(p), t).item()
    assert -1e-9 <= base <= 1 + 1e-6
    inside = np.argwhere(t > 0)
    if len(inside):
        idx = tuple(inside[0])
        q = p.copy()
        q[idx] = min(1.0, q[idx] + 0.2)
        assert L.soft_dice_loss(tt(q), t).item() <= base + 1e-12


def test_inverse_frequency_weights():
    np.testing.assert_allclose(L.inverse_frequency_weights([10, 10, 10]), [1, 1, 1])
    np.testing.assert_allclose(L.inverse_frequency_weights([30, 10]), [40 / 60, 2.0])
    counts = np.array([3, 17, 8, 1])
    w = L.inverse_frequency_weights(counts)
    assert (w * counts).sum() == pytest.approx(counts.sum())
    with pytest.raises(DegenerateDataError):
        L.inverse_frequency_weights([3, 0, 2])


def test_cross_entropy_examples():
    assert L.cross_entropy(tt([[0.0, 1.0, 0.0]]), [1]).item() == 0.0
    assert L.cross_entropy(tt([[1 / 3] * 3]), [2]).item() == pytest.approx(math.log(3), abs=1e-12)
    probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]])
    labels = [0, 1, 1]
    w = [2.0, 1.0]
    expected = -(2 * math.log(0.7) + math.log(0.8) + math.log(0.4)) / 3
    assert L.weighted_cross_entropy(tt(probs), labels, w).item() == pytest.approx(expected, abs=1e-12)
    with pytest.raises(InvalidLabelError):
        L.cross_entropy(tt(probs), [0, 2, 1])
    assert np.isfinite(L.cross_entropy(tt([[1.0, 0.0]]), [1]).item())


def test_unit_weights_equal_unweighted_bitwise():
    probs = np.random.default_rng(0).dirichlet([1, 1, 1], size=5).astype(np.float32)
    labels = [0, 2, 1, 1, 0]
    a = L.weighted_cross_entropy(T.Tensor(probs), labels, [1.0, 1.0, 1.0]).data
    b = L.cross_entropy(T.Tensor(probs), labels).data
    assert a.tobytes() == b.tobytes()


def test_joint_loss_examples():
    cfg = L.LossConfig()
    off, on = L.GateState(0.1, False), L.GateState(0.5, True)
    assert L.joint_loss(0.4, 1.0, off, cfg) == 0.2
    assert L.joint_loss(0.4, 1.0, on, cfg) == pytest.approx(0.30, abs=1e-15)
    assert L.joint_loss(0.4, 0.0, on, cfg) == 0.2
    assert L.joint_loss(0.4, 1.0, on, L.LossConfig(combine="sum")) == pytest.approx(0.6)


def test_joint_loss_gate_off_never_touches_ce():
    dice, ce = tt(0.3, grad=True), tt(2.0, grad=True)
    with T.Tape() as tape:
        loss = L.joint_loss(dice, ce, L.GateState(), L.LossConfig())
    T.backward(tape, loss)
    assert loss.item() == 0.15 and dice.grad == 0.5
    assert ce.grad is None or np.all(ce.grad == 0)


def test_hard_iou_examples():
    a = np.array([1, 1, 0, 0], float)
    assert L.hard_iou(a, a) == 1
    assert L.hard_iou(a, 1 - a) == 0
    assert L.hard_iou([0.9, 0.2], [1, 1]) == 0.5
    assert L.hard_iou(np.zeros(3), np.zeros(3)) == 1.0


def test_gate_update():
    cfg = L.LossConfig()
    s = L.gate_update(L.GateState(0.449), 0.449, cfg)
    assert not s.latched
    s, steps = L.GateState(), 0
    while not s.latched:
        s = L.gate_update(s, 1.0, cfg)
        steps += 1
    assert steps <= 22 and s.ema_iou >= 0.45
    for _ in range(50):
        s = L.gate_update(s, 0.0, cfg)
    assert s.latched and s.ema_iou < 0.45


def test_loss_config_validation():
    with pytest.raises(InvalidConfigError):
        L.LossConfig(ce_weight=0).validate()
    with pytest.raises(InvalidConfigError):
        L.LossConfig(gate_iou_threshold=1.0).validate()
    with pytest.raises(InvalidConfigError):
        L.LossConfig(class_weights=[1.0, -1.0]).validate()
