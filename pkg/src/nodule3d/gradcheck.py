"""Central finite-difference gradient checks in 64-bit mode.

Each case draws random inputs, builds a scalar ``sum(out * R)`` for a fixed
random projection ``R`` and compares the tape gradient of every input with
central differences.  The error of a trial is norm-wise:

    ||analytic - numeric|| / max(||analytic||, ||numeric||)

Inputs to max-like ops are drawn with a guaranteed gap between candidates so
that a step of ``h`` never changes which element wins.  Composite checks
cannot control their internal activations, so every branch choice (max-pool
and max winners, ReLU sign patterns; ELU is C1 so its sign flips are harmless) is recorded during the perturbed
evaluations; a coordinate whose +h or -h step flips a choice straddles a kink
and is excluded and counted rather than compared.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from . import losses as L
from . import model as M
from . import tensor as T

H = 1e-4
TOLERANCE = 1e-4
DEFAULT_TRIALS = 20


def _separated(rng, shape, gap=0.05):
    """Random values whose pairwise differences are all at least ``gap``."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2) * gap + rng.uniform(0, gap / 4, n)).reshape(shape)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _dims(rng, lo=1, hi=4, n=3):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


# A case builder returns (inputs, fn); ``fn(tensors)`` maps the list of input
# tensors to an output tensor.  Non-differentiated arguments are closed over.

def _case_conv3d(rng):
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k))
    # extents with (d + 2p - k) divisible by the stride
    sp = tuple(k - 2 * pad + stride * int(m) + (2 * pad if k - 2 * pad + stride * int(m) < 1 else 0)
               for m in rng.integers(0, 3, size=3))
    x = rng.normal(size=(n, cin, *sp))
    w = rng.normal(size=(cout, cin, k, k, k)) / np.sqrt(cin * k ** 3)
    b = rng.normal(size=cout)
    return [x, w, b], lambda t: T.conv3d(t[0], t[1], t[2], stride=stride, padding=pad)


def _case_upsample(rng):
    return [rng.normal(size=(1, 2, *_dims(rng, 1, 3)))], lambda t: T.upsample_nearest_2x(t[0])


def _case_maxpool(rng):
    sp = tuple(2 * d for d in _dims(rng, 1, 2))
    return [_separated(rng, (1, 2, *sp))], lambda t: T.maxpool3d_2x(t[0])


def _case_gap(rng):
    return [rng.normal(size=(2, 3, *_dims(rng)))], lambda t: T.global_avg_pool(t[0])


def _case_gmp(rng):
    return [_separated(rng, (2, 3, *_dims(rng)))], lambda t: T.global_max_pool(t[0])


def _case_channel_mean(rng):
    return [rng.normal(size=(2, 3, *_dims(rng)))], lambda t: T.channel_mean(t[0])


def _case_channel_max(rng):
    return [_separated(rng, (1, 3, *_dims(rng)))], lambda t: T.channel_max(t[0])


def _case_elu(rng):
    return [_away_from_zero(rng, (2, 3, *_dims(rng)))], lambda t: T.elu(t[0])


def _case_relu(rng):
    return [_away_from_zero(rng, (2, 3, *_dims(rng)))], lambda t: T.relu(t[0])


def _case_sigmoid(rng):
    return [3 * rng.normal(size=(2, 2, *_dims(rng)))], lambda t: T.sigmoid(t[0])


def _case_softmax(rng):
    return [2 * rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(2, 5))))], \
        lambda t: T.softmax(t[0])


def _case_group_norm(rng):
    groups = int(rng.choice([1, 2]))
    c = groups * int(rng.integers(1, 3))
    x = rng.normal(size=(2, c, *_dims(rng, 2, 3)))
    return [x, 1 + 0.3 * rng.normal(size=c), rng.normal(size=c)], \
        lambda t: T.group_norm(t[0], t[1], t[2], groups=groups)


def _case_linear(rng):
    n, f, o = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return [rng.normal(size=(n, f)), rng.normal(size=(f, o)), rng.normal(size=o)], \
        lambda t: T.linear(t[0], t[1], t[2])


def _case_dropout(rng):
    seed = int(rng.integers(2 ** 31))
    return [rng.normal(size=(3, 5))], lambda t: T.dropout(t[0], 0.4, True, seed)


def _case_concat(rng):
    sp = _dims(rng)
    return [rng.normal(size=(1, 2, *sp)), rng.normal(size=(1, 1, *sp))], \
        lambda t: T.concat_channels(t[0], t[1])


def _case_add(rng):
    sp = _dims(rng)
    return [rng.normal(size=(2, 3, *sp)), rng.normal(size=(2, 3, *sp))], lambda t: T.add(t[0], t[1])


def _case_mul(rng):
    sp = _dims(rng)
    return [rng.normal(size=(2, 3, *sp)), rng.normal(size=(2, 3, 1, 1, 1))], \
        lambda t: T.mul(t[0], t[1])


def _case_scale(rng):
    c = float(rng.normal())
    return [rng.normal(size=(2, 3))], lambda t: T.scale(t[0], c)


def _case_reshape(rng):
    return [rng.normal(size=(2, 3, 2, 1, 2))], lambda t: T.reshape(t[0], (2, 12))


def _case_mean_all(rng):
    return [rng.normal(size=(2, 3, *_dims(rng)))], lambda t: T.mean_all(t[0])


def _case_select_rows(rng):
    rows = [int(r) for r in rng.integers(0, 4, size=3)]
    return [rng.normal(size=(4, 3))], lambda t: T.select_rows(t[0], rows)


def _case_dice(rng):
    target = (rng.random((2, 1, 3, 3, 3)) < 0.4).astype(np.float64)
    pred = rng.uniform(0.05, 0.95, size=target.shape)
    return [pred], lambda t: L.soft_dice_loss(t[0], target)


def _case_weighted_ce(rng):
    n, k = int(rng.integers(1, 5)), 3
    probs = rng.uniform(0.1, 1.0, size=(n, k))
    probs /= probs.sum(1, keepdims=True)
    labels = rng.integers(0, k, size=n)
    weights = rng.uniform(0.5, 2.0, size=k)
    return [probs], lambda t: L.weighted_cross_entropy(t[0], labels, weights)


def _case_joint_loss(rng):
    cfg = L.LossConfig(combine=str(rng.choice(["average", "sum"])))
    gate = L.GateState(0.5, True)
    return [rng.uniform(0.1, 1, size=()), rng.uniform(0.1, 2, size=())], \
        lambda t: L.joint_loss(t[0], t[1], gate, cfg)


OP_CASES = {
    "conv3d": _case_conv3d,
    "upsample_nearest_2x": _case_upsample,
    "maxpool3d_2x": _case_maxpool,
    "global_avg_pool": _case_gap,
    "global_max_pool": _case_gmp,
    "channel_mean": _case_channel_mean,
    "channel_max": _case_channel_max,
    "elu": _case_elu,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "group_norm": _case_group_norm,
    "linear": _case_linear,
    "dropout": _case_dropout,
    "concat_channels": _case_concat,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "reshape": _case_reshape,
    "mean_all": _case_mean_all,
    "select_rows": _case_select_rows,
    "soft_dice_loss": _case_dice,
    "weighted_cross_entropy": _case_weighted_ce,
    "joint_loss": _case_joint_loss,
}


def _param_case(params, fn, x):
    names = list(params)
    arrays = [params[k].data.astype(np.float64) for k in names] + [x]

    def run(t):
        return fn(dict(zip(names, t[:-1])), t[-1])
    return arrays, run


def _case_residual_block(rng):
    cin, cout = int(rng.choice([2, 4])), int(rng.choice([2, 4]))
    spec = M._block(cin, cout)
    params = {k: T.Tensor(_init_array(rng, shape, fan)) for k, (shape, fan) in spec.items()}
    x = rng.normal(size=(1, cin, *_dims(rng, 2, 3)))
    return _param_case(params, lambda p, t: M.residual_block(t, p, 2), x)


def _case_cbam(rng):
    c = int(rng.choice([2, 4]))
    spec = M._cbam(c, reduction=2)
    params = {k: T.Tensor(_init_array(rng, shape, fan)) for k, (shape, fan) in spec.items()}
    x = _separated(rng, (1, c, *_dims(rng, 2, 3)), gap=0.1)
    return _param_case(params, lambda p, t: M.cbam3d(t, p), x)


def _init_array(rng, shape, fan_in):
    if fan_in is None:
        return 1 + 0.2 * rng.normal(size=shape)
    return rng.uniform(-1, 1, size=shape) * np.sqrt(3.0 / fan_in)


BLOCK_CASES = {
    "residual_block": _case_residual_block,
    "cbam3d": _case_cbam,
}


def _model_case(rng, use_cbam):
    cfg = M.JointModelConfig(stages=2, base_features=4, groups=4, use_cbam=use_cbam,
                             cbam_reduction=2)
    params = M.init_params(cfg, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    for k, p in params.items():
        if p.data.ndim == 1:
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
    x = rng.uniform(0, 1, size=(2, 1, 8, 8, 8))
    target = (rng.random((2, 1, 8, 8, 8)) < 0.3).astype(np.float64)
    labels = rng.integers(0, cfg.texture_classes, size=2)
    lcfg = L.LossConfig(combine="sum")
    gate = L.GateState(0.5, True)

    def loss(p, xt):
        mask, cls = M.joint_forward(xt, p, cfg, training=False)
        return L.joint_loss(L.soft_dice_loss(mask, target), L.cross_entropy(cls, labels), gate, lcfg)
    return _param_case(params, loss, x)


MODEL_CASES = {
    "joint_model": lambda rng: _model_case(rng, False),
    "joint_model_cbam": lambda rng: _model_case(rng, True),
}

SCOPES = {"ops": OP_CASES, "blocks": BLOCK_CASES, "model": MODEL_CASES}


def _scalar(out, proj):
    if out.data.size == 1 and proj is None:
        return out
    return T.sum_all(T.mul(out, T.Tensor(proj)))


_BRANCHING = {
    "maxpool2x_forward": lambda out: out[1][0],
    "global_max_pool_forward": lambda out: out[1][0],
    "channel_max_forward": lambda out: out[1][0],
    "relu_forward": lambda out: out[0] > 0,
}


@contextlib.contextmanager
def branch_log():
    """Record the branch pattern of every kinked kernel called inside the block."""
    log = []
    originals = {name: getattr(K, name) for name in _BRANCHING}

    def wrap(name, fn):
        def inner(*args, **kwargs):
            out = fn(*args, **kwargs)
            log.append(np.asarray(_BRANCHING[name](out)).tobytes())
            return out
        return inner

    for name, fn in originals.items():
        setattr(K, name, wrap(name, fn))
    try:
        yield log
    finally:
        for name, fn in originals.items():
            setattr(K, name, fn)


@dataclass
class TrialResult:
    rel_error: float
    checked: int
    skipped: int


def check_case(arrays, fn, rng, h=H, max_coords=None):
    """Compare tape and central-difference gradients for one trial.

    ``max_coords`` caps the number of coordinates differenced per input (they
    are sampled without replacement); ``None`` checks every coordinate.
    """
    proj = None
    with T.Tape():
        probe = fn([T.Tensor(a, dtype=np.float64) for a in arrays])
    if probe.data.size != 1:
        proj = rng.normal(size=probe.shape)

    leaves = [T.Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    with branch_log() as base_branches, T.Tape() as tape:
        loss = _scalar(fn(leaves), proj)
    T.backward(tape, loss)

    def value(args):
        with branch_log() as branches:
            v = _scalar(fn([T.Tensor(a, dtype=np.float64) for a in args]), proj).item()
        return v, branches == base_branches

    analytic, numeric, skipped = [], [], 0
    work = [a.copy() for a in arrays]
    for i, leaf in enumerate(leaves):
        flat = work[i].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g = leaf.grad.reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            up, same_up = value(work)
            flat[j] = orig - h
            down, same_down = value(work)
            flat[j] = orig
            if not (same_up and same_down):
                skipped += 1
                continue
            numeric.append((up - down) / (2 * h))
            analytic.append(g[j])
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    err = 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)
    return TrialResult(err, len(a), skipped)


@dataclass
class OpReport:
    name: str
    trials: int
    max_rel_error: float
    passed: bool
    checked: int = 0
    skipped: int = 0
    error: str = ""


@dataclass
class GradcheckReport:
    ops: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(r.passed for r in self.ops)

    @property
    def failures(self):
        return [r.name for r in self.ops if not r.passed]

    def format(self):
        lines = [f"{'op':<26}{'trials':>7}{'coords':>8}{'kinks':>7}{'max_rel_err':>14}  status"]
        for r in self.ops:
            status = "ok" if r.passed else "FAIL" + (f" ({r.error})" if r.error else "")
            lines.append(f"{r.name:<26}{r.trials:>7}{r.checked:>8}{r.skipped:>7}"
                         f"{r.max_rel_error:>14.3e}  {status}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: {len(self.ops) - len(self.failures)}/"
                     f"{len(self.ops)} in {self.seconds:.1f}s")
        return "\n".join(lines)


def run_gradcheck(scope="all", trials=DEFAULT_TRIALS, seed=0, tolerance=TOLERANCE, only=None):
    """Run the selected suite(s); ``scope`` is ``ops``, ``blocks``, ``model`` or ``all``."""
    scopes = list(SCOPES) if scope == "all" else [scope]
    for s in scopes:
        if s not in SCOPES:
            raise ValueError(f"unknown gradcheck scope {s!r}")
    report = GradcheckReport()
    start = time.perf_counter()
    for s in scopes:
        max_coords = {"ops": None, "blocks": 24, "model": 4}[s]
        for name, builder in SCOPES[s].items():
            if only is not None and name not in only:
                continue
            rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
            worst, err, checked, skipped = 0.0, "", 0, 0
            for _ in range(trials):
                try:
                    arrays, fn = builder(rng)
                    res = check_case(arrays, fn, rng, max_coords=max_coords)
                except Exception as exc:  # reported, not raised: the suite names the op
                    worst, err = float("inf"), f"{type(exc).__name__}: {exc}"
                    break
                worst = max(worst, res.rel_error)
                checked += res.checked
                skipped += res.skipped
            ok = worst < tolerance and not err and checked > 0
            report.ops.append(OpReport(name, trials, worst, ok, checked, skipped, err))
    report.seconds = time.perf_counter() - start
    return report
