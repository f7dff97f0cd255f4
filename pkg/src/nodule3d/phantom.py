"""Synthetic CT-like candidate cubes and the dataset manifest.

Each candidate is a cubic patch in Hounsfield-like units: noisy lung
background, optionally a bright vessel segment (never part of the mask), and,
for real nodules, a randomly rotated ellipsoid whose appearance encodes the
texture class:

* SOLID      dense, sharp-edged
* GGO        faint and blurred
* PARTSOLID  a dense core inside a faint halo

Non-nodule candidates carry no ellipsoid and an empty mask.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import ndt
from .errors import LoadError
from .fleischner import NoduleRecord, Texture, mask_volume_mm3, write_nodule_csv

MANIFEST_HEADER = ["sample_id", "patient_id", "volume", "mask", "texture", "is_nodule", "split"]

BACKGROUND_HU = -850.0
BACKGROUND_NOISE_HU = 30.0
SOLID_HU = 40.0
GGO_HU = -550.0
VESSEL_HU = -50.0


@dataclass
class PhantomConfig:
    patch_extent: int = 32
    min_candidates: int = 1
    max_candidates: int = 4
    nonnodule_fraction: float = 0.2
    radius_range: tuple = (2.0, 6.0)
    center_jitter: int = 2
    vessel_prob: float = 0.5
    train_fraction: float = 0.7
    spacing_mm: tuple = (1.0, 1.0, 1.0)


@dataclass
class Sample:
    sample_id: str
    patient_id: str
    volume_path: str
    mask_path: str
    texture: Texture | None
    is_nodule: bool
    split: str

    def load(self):
        return ndt.load(self.volume_path), ndt.load(self.mask_path)


@dataclass
class DatasetManifest:
    samples: list
    root: str = "."

    def split(self, tag):
        return [s for s in self.samples if s.split == tag]


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(shape, center, semi_axes, rot):
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"), -1)
    local = (grid - center) @ rot
    return ((local / semi_axes) ** 2).sum(-1) <= 1.0


def _vessel(shape, rng):
    n = shape[0]
    p0 = rng.uniform(0, n - 1, size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"), -1)
    rel = grid - p0
    dist = np.linalg.norm(rel - (rel @ direction)[..., None] * direction, axis=-1)
    return dist <= rng.uniform(1.0, 1.6)


def make_candidate(rng, cfg, is_nodule, texture):
    """Return ``(image_hu, mask)`` as float32 arrays of shape ``(E, E, E)``."""
    e = cfg.patch_extent
    shape = (e, e, e)
    img = BACKGROUND_HU + rng.normal(0.0, BACKGROUND_NOISE_HU, size=shape)
    if rng.random() < cfg.vessel_prob:
        img += (VESSEL_HU - BACKGROUND_HU) * ndimage.gaussian_filter(_vessel(shape, rng).astype(float), 0.6)
    mask = np.zeros(shape, dtype=bool)
    if is_nodule:
        center = (e - 1) / 2 + rng.integers(-cfg.center_jitter, cfg.center_jitter + 1, size=3)
        semi = rng.uniform(*cfg.radius_range, size=3)
        rot = _random_rotation(rng)
        mask = _ellipsoid(shape, center, semi, rot)
        body = mask.astype(float)
        if texture == Texture.SOLID:
            img += (SOLID_HU - BACKGROUND_HU) * ndimage.gaussian_filter(body, 0.5)
        elif texture == Texture.GGO:
            img += (GGO_HU - BACKGROUND_HU) * ndimage.gaussian_filter(body, 1.2)
        else:
            core = _ellipsoid(shape, center, semi * 0.5, rot).astype(float)
            img += (GGO_HU - BACKGROUND_HU) * ndimage.gaussian_filter(body, 1.0)
            img += (SOLID_HU - GGO_HU) * ndimage.gaussian_filter(core, 0.5)
    return img.astype(np.float32), mask.astype(np.float32)


def normalize_intensity(hu, lo=-1000.0, hi=400.0):
    return ((np.clip(hu, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def generate_phantom_dataset(out_dir, n_patients, cfg=None, seed=0):
    """Write volumes, masks, ``manifest.csv`` and ``nodules_gt.csv``; return the manifest.

    Patient ``i`` draws from RNG ``(seed, i)`` so output does not depend on
    how many patients are generated after it.  The split is by patient.
    """
    cfg = cfg or PhantomConfig()
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    os.makedirs(os.path.join(out_dir, "cases"), exist_ok=True)
    order = np.random.default_rng([seed, 2 ** 31]).permutation(n_patients)
    n_train = int(round(cfg.train_fraction * n_patients))
    split_of = {int(p): ("train" if rank < n_train else "val") for rank, p in enumerate(order)}

    samples, records = [], []
    for i in range(n_patients):
        rng = np.random.default_rng([seed, i])
        pid = f"P{i:04d}"
        n_cand = int(rng.integers(cfg.min_candidates, cfg.max_candidates + 1))
        for j in range(n_cand):
            sid = f"{pid}_C{j}"
            is_nodule = bool(rng.random() >= cfg.nonnodule_fraction)
            texture = Texture(int(rng.integers(3))) if is_nodule else None
            img, mask = make_candidate(rng, cfg, is_nodule, texture)
            vpath = os.path.join("cases", f"{sid}_vol.ndt")
            mpath = os.path.join("cases", f"{sid}_mask.ndt")
            ndt.save(os.path.join(out_dir, vpath), img)
            ndt.save(os.path.join(out_dir, mpath), mask)
            samples.append(Sample(sid, pid, vpath, mpath, texture, is_nodule, split_of[i]))
            records.append(NoduleRecord(pid, mask_volume_mm3(mask, cfg.spacing_mm), texture,
                                        is_nodule, "ground_truth", sid))
    write_manifest(os.path.join(out_dir, "manifest.csv"), samples)
    write_nodule_csv(os.path.join(out_dir, "nodules_gt.csv"), records)
    with open(os.path.join(out_dir, "patients.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(f"P{i:04d}\n" for i in range(n_patients)))
    return load_manifest(os.path.join(out_dir, "manifest.csv"))


def write_manifest(path, samples):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in samples:
            w.writerow([s.sample_id, s.patient_id, s.volume_path, s.mask_path,
                        "NONE" if s.texture is None else s.texture.name,
                        int(s.is_nodule), s.split])


def load_manifest(path):
    root = os.path.dirname(os.path.abspath(path))
    if not os.path.exists(path):
        raise LoadError(f"no manifest at {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise LoadError(f"unexpected manifest header {reader.fieldnames}")
        samples = []
        for row in reader:
            tex = row["texture"].strip().upper()
            vpath = os.path.join(root, row["volume"])
            mpath = os.path.join(root, row["mask"])
            for p in (vpath, mpath):
                if not os.path.exists(p):
                    raise LoadError(f"manifest references missing file {p}")
            samples.append(Sample(row["sample_id"], row["patient_id"], vpath, mpath,
                                  None if tex == "NONE" else Texture[tex],
                                  row["is_nodule"].strip() == "1", row["split"]))
    return DatasetManifest(samples, root)


def read_patient_list(root):
    path = os.path.join(root, "patients.txt")
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]
