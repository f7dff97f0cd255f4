"""Checkpoint directories: ``manifest.txt`` plus one NDT1 file per parameter.

The manifest is ``key=value`` text: ``kind``, ``step``, every model config
field as ``model.<field>``, metric snapshots as ``metric.<name>`` and one
``param=<name>`` line per stored tensor, in layout order.
"""

from __future__ import annotations

import os
import shutil

import numpy as np

from . import ndt
from .errors import LoadError
from .model import JointModelConfig
from .tensor import Tensor

MANIFEST = "manifest.txt"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(path, params, cfg, step=0, metrics=None, kind="joint"):
    """Write atomically: build the directory next to ``path`` and rename it in."""
    path = os.fspath(path)
    tmp = path.rstrip("/") + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    lines = [f"kind={kind}", f"step={int(step)}"]
    lines += [f"model.{k}={_fmt(v)}" for k, v in cfg.as_dict().items()]
    for k, v in sorted((metrics or {}).items()):
        lines.append(f"metric.{k}={_fmt(v)}")
    for name, t in params.items():
        ndt.save(os.path.join(tmp, f"{name}.ndt"), t.data)
        lines.append(f"param={name}")
    with open(os.path.join(tmp, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if os.path.exists(path):
        old = path.rstrip("/") + ".old"
        if os.path.exists(old):
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def read_manifest(path):
    mpath = os.path.join(os.fspath(path), MANIFEST)
    if not os.path.exists(mpath):
        raise LoadError(f"no checkpoint manifest at {mpath}")
    meta, names = {}, []
    with open(mpath, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            k, v = line.split("=", 1)
            if k == "param":
                names.append(v)
            else:
                meta[k] = v
    return meta, names


def load_checkpoint(path, dtype=np.float32):
    """Return ``(params, model_cfg, meta)``."""
    meta, names = read_manifest(path)
    cfg = JointModelConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
    params = {}
    for name in names:
        arr = ndt.load(os.path.join(os.fspath(path), f"{name}.ndt"))
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params, cfg, meta
