"""Residual 3D U-Net with a texture classification head.

The network is functional: every forward takes a flat ``{name: Tensor}``
parameter map.  Names follow the layer path, e.g. ``enc.3.block.conv2.weight``.

Layout for ``stages = S`` and ``base = B``::

    stem        conv 3^3, in_channels -> B
    enc.i       residual block -> B*2^i channels (+ CBAM); skip i = its output
                max-pool 2x between stages and once more after the last one
    dec.i       (i = S-1 .. 0) upsample 2x, conv 3^3 -> B*2^i, concat skip i,
                residual block 2*B*2^i -> B*2^i (+ CBAM)
    seg         conv 1^3 -> 1, sigmoid
    cls         GAP(bottleneck) -> FC 128 -> ELU -> dropout -> FC 32 -> ELU
                -> FC K -> softmax
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import InvalidConfigError, InvalidShapeError, LoadError
from .tensor import Tensor


@dataclass
class JointModelConfig:
    stages: int = 5
    base_features: int = 8
    groups: int = 8
    texture_classes: int = 3
    dropout_rate: float = 0.6
    use_cbam: bool = False
    input_channels: int = 1
    hidden1: int = 128
    hidden2: int = 32
    cbam_reduction: int = 16

    @classmethod
    def paper(cls, profile="trainval"):
        """Full-width configuration; ``profile`` picks the dropout rate."""
        rates = {"trainval": 0.6, "test": 0.4}
        if profile not in rates:
            raise InvalidConfigError(f"unknown profile {profile!r}")
        return cls(base_features=32, dropout_rate=rates[profile])

    def validate(self):
        if self.stages < 1:
            raise InvalidConfigError("stages must be >= 1")
        if self.groups < 1 or self.base_features % self.groups:
            raise InvalidConfigError(
                f"base_features={self.base_features} is not divisible by groups={self.groups}")
        if self.texture_classes not in (2, 3, 5):
            raise InvalidConfigError("texture_classes must be 2, 3 or 5")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidConfigError("dropout_rate must lie in [0, 1)")
        return self

    def stage_channels(self):
        return [self.base_features * 2 ** i for i in range(self.stages)]

    def bottleneck_channels(self):
        return self.stage_channels()[-1]

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        out = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                out[f.name] = _coerce(v, type(getattr(cls, f.name)))
        return cls(**out)


def _coerce(v, typ):
    if isinstance(v, str):
        if typ is bool:
            return v.strip().lower() in ("1", "true", "yes", "on")
        return typ(v)
    return typ(v)


# ---------------------------------------------------------------------------
# parameter layout and initialization


def _conv(cout, cin, k):
    return {"weight": ((cout, cin, k, k, k), cin * k ** 3), "bias": ((cout,), None)}


def _fc(fin, fout):
    return {"weight": ((fin, fout), fin), "bias": ((fout,), None)}


def _block(cin, cout):
    spec = {}
    spec.update({f"gn1.{k}": ((cin,), None) for k in ("gamma", "beta")})
    spec.update({f"conv1.{k}": v for k, v in _conv(cout, cin, 3).items()})
    spec.update({f"gn2.{k}": ((cout,), None) for k in ("gamma", "beta")})
    spec.update({f"conv2.{k}": v for k, v in _conv(cout, cout, 3).items()})
    if cin != cout:
        spec.update({f"skip.{k}": v for k, v in _conv(cout, cin, 1).items()})
    return spec


def _cbam(c, reduction):
    r = max(c // reduction, 1)
    spec = {}
    spec.update({f"mlp1.{k}": v for k, v in _fc(c, r).items()})
    spec.update({f"mlp2.{k}": v for k, v in _fc(r, c).items()})
    spec.update({f"spatial.{k}": v for k, v in _conv(1, 2, 7).items()})
    return spec


def _prefixed(prefix, spec):
    return {f"{prefix}.{k}": v for k, v in spec.items()}


def parameter_layout(cfg, decoder=True, head=True):
    """Ordered map name -> (shape, fan_in); fan_in is None for biases and norms."""
    cfg.validate()
    ch = cfg.stage_channels()
    layout = {}
    layout.update(_prefixed("stem", _conv(cfg.base_features, cfg.input_channels, 3)))
    for i, c in enumerate(ch):
        cin = cfg.base_features if i == 0 else ch[i - 1]
        layout.update(_prefixed(f"enc.{i}.block", _block(cin, c)))
        if cfg.use_cbam:
            layout.update(_prefixed(f"enc.{i}.cbam", _cbam(c, cfg.cbam_reduction)))
    if decoder:
        incoming = ch[-1]
        for i in reversed(range(cfg.stages)):
            c = ch[i]
            layout.update(_prefixed(f"dec.{i}.up", _conv(c, incoming, 3)))
            layout.update(_prefixed(f"dec.{i}.block", _block(2 * c, c)))
            if cfg.use_cbam:
                layout.update(_prefixed(f"dec.{i}.cbam", _cbam(c, cfg.cbam_reduction)))
            incoming = c
        layout.update(_prefixed("seg", _conv(1, cfg.base_features, 1)))
    if head:
        layout.update(_prefixed("cls.fc1", _fc(ch[-1], cfg.hidden1)))
        layout.update(_prefixed("cls.fc2", _fc(cfg.hidden1, cfg.hidden2)))
        layout.update(_prefixed("cls.fc3", _fc(cfg.hidden2, cfg.texture_classes)))
    return layout


def init_params(cfg, seed=0, dtype=np.float32, decoder=True, head=True):
    """Fan-in scaled uniform weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, fan_in) in parameter_layout(cfg, decoder, head).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif fan_in is None:
            arr = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def cast_params(params, dtype):
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
            for k, v in params.items()}


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# blocks


def residual_block(x, p, groups):
    """Pre-activation residual block: (GN, ELU, conv) x 2 plus identity or 1^3 skip."""
    cin = x.shape[1]
    if cin % groups:
        raise InvalidConfigError(f"{cin} channels are not divisible into {groups} groups")
    h = T.elu(T.group_norm(x, p["gn1.gamma"], p["gn1.beta"], groups))
    h = T.conv3d(h, p["conv1.weight"], p["conv1.bias"], padding=1)
    h = T.elu(T.group_norm(h, p["gn2.gamma"], p["gn2.beta"], groups))
    h = T.conv3d(h, p["conv2.weight"], p["conv2.bias"], padding=1)
    skip = T.conv3d(x, p["skip.weight"], p["skip.bias"]) if "skip.weight" in p else x
    return T.add(h, skip)


def channel_gate(x, p):
    avg = T.global_avg_pool(x)
    mx = T.global_max_pool(x)

    def mlp(v):
        return T.linear(T.elu(T.linear(v, p["mlp1.weight"], p["mlp1.bias"])),
                        p["mlp2.weight"], p["mlp2.bias"])

    return T.sigmoid(T.add(mlp(avg), mlp(mx)))


def spatial_gate(x, p):
    maps = T.concat_channels(T.channel_mean(x), T.channel_max(x))
    return T.sigmoid(T.conv3d(maps, p["spatial.weight"], p["spatial.bias"], padding=3))


def cbam3d(x, p):
    """Channel attention followed by spatial attention; both gates lie in (0, 1)."""
    n, c = x.shape[:2]
    if c < 2:
        raise InvalidShapeError("CBAM needs at least two channels")
    cg = channel_gate(x, p)
    x = T.mul(x, T.reshape(cg, (n, c, 1, 1, 1)))
    return T.mul(x, spatial_gate(x, p))


def encoder_forward(x, params, cfg):
    """Return ``(skips, bottleneck)``; skips are the pre-pool stage outputs."""
    cfg.validate()
    step = 2 ** cfg.stages
    if x.ndim != 5 or any(s % step for s in x.shape[2:]):
        raise InvalidShapeError(f"spatial extents {x.shape[2:]} must be divisible by {step}")
    if x.shape[1] != cfg.input_channels:
        raise InvalidShapeError(f"expected {cfg.input_channels} input channels, got {x.shape[1]}")
    h = T.conv3d(x, params["stem.weight"], params["stem.bias"], padding=1)
    skips = []
    for i in range(cfg.stages):
        if i:
            h = T.maxpool3d_2x(h)
        h = residual_block(h, _sub(params, f"enc.{i}.block"), cfg.groups)
        if cfg.use_cbam:
            h = cbam3d(h, _sub(params, f"enc.{i}.cbam"))
        skips.append(h)
    return skips, T.maxpool3d_2x(h)


def decoder_forward(skips, bottleneck, params, cfg):
    if len(skips) != cfg.stages:
        raise InvalidShapeError(f"expected {cfg.stages} skips, got {len(skips)}")
    h = bottleneck
    for i in reversed(range(cfg.stages)):
        p = _sub(params, f"dec.{i}")
        h = T.upsample_nearest_2x(h)
        if h.shape[2:] != skips[i].shape[2:]:
            raise InvalidShapeError(f"decoder stage {i}: {h.shape} does not line up with skip {skips[i].shape}")
        h = T.conv3d(h, p["up.weight"], p["up.bias"], padding=1)
        h = T.concat_channels(h, skips[i])
        h = residual_block(h, _sub(p, "block"), cfg.groups)
        if cfg.use_cbam:
            h = cbam3d(h, _sub(p, "cbam"))
    return h


def segmentation_head(features, params):
    return T.sigmoid(T.conv3d(features, params["seg.weight"], params["seg.bias"]))


def classification_head(bottleneck, params, cfg, training=False, seed=0):
    h = T.global_avg_pool(bottleneck)
    h = T.elu(T.linear(h, params["cls.fc1.weight"], params["cls.fc1.bias"]))
    h = T.dropout(h, cfg.dropout_rate, training, seed)
    h = T.elu(T.linear(h, params["cls.fc2.weight"], params["cls.fc2.bias"]))
    return T.softmax(T.linear(h, params["cls.fc3.weight"], params["cls.fc3.bias"]))


def joint_forward(x, params, cfg, training=False, seed=0):
    """One shared encoder pass feeding both heads -> ``(mask_probs, class_probs)``."""
    skips, bottleneck = encoder_forward(x, params, cfg)
    class_probs = classification_head(bottleneck, params, cfg, training, seed)
    mask_probs = segmentation_head(decoder_forward(skips, bottleneck, params, cfg), params)
    return mask_probs, class_probs


# ---------------------------------------------------------------------------
# non-nodule recognizer (encoder + 2-way head)


def recognizer_config(cfg):
    d = cfg.as_dict()
    d["texture_classes"] = 2
    return JointModelConfig(**d)


def nonnodule_recognizer_forward(x, params, cfg_binary, training=False, seed=0):
    if cfg_binary.texture_classes != 2:
        raise InvalidConfigError("the recognizer needs texture_classes = 2")
    _, bottleneck = encoder_forward(x, params, cfg_binary)
    return classification_head(bottleneck, params, cfg_binary, training, seed)


def recognizer_params_from_joint(joint_params, cfg_binary, seed=0):
    """Initialize recognizer weights by name from a joint checkpoint.

    Encoder entries must match exactly; decoder and segmentation entries are
    dropped; head entries are copied where shapes agree and freshly
    initialized otherwise.
    """
    fresh = init_params(cfg_binary, seed, decoder=False, head=True)
    out = {}
    for name, t in fresh.items():
        src = joint_params.get(name)
        is_encoder = name.startswith(("stem.", "enc."))
        if src is None or src.shape != t.shape:
            if is_encoder:
                raise LoadError(f"checkpoint has no compatible entry for encoder parameter {name}")
            out[name] = t
        else:
            out[name] = Tensor(src.data.astype(t.dtype, copy=True), requires_grad=True, name=name)
    return out
