"""Paired image/mask augmentations for cubic patches.

Geometric transforms are applied identically to image and mask.  Masks are
always resampled with nearest-neighbour lookup so they stay binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidConfigError, InvalidShapeError

ROT_PLANES = ((0, 1), (0, 2), (1, 2))


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    rot90_prob: float = 0.5
    elastic_prob: float = 0.5
    elastic_grid_spacing: int = 8
    elastic_max_displacement: float = 2.0
    noise_prob: float = 0.5
    noise_sigma: float = 0.05

    @classmethod
    def off(cls):
        return cls(enabled=False, flip_prob=0.0, rot90_prob=0.0, elastic_prob=0.0, noise_prob=0.0)

    def validate(self):
        for name in ("flip_prob", "rot90_prob", "elastic_prob", "noise_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidConfigError(f"{name} must lie in [0, 1]")
        if self.elastic_grid_spacing < 1:
            raise InvalidConfigError("elastic_grid_spacing must be >= 1")
        if not 0 <= self.elastic_max_displacement < self.elastic_grid_spacing / 2:
            raise InvalidConfigError("elastic_max_displacement must be below half the grid spacing")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be >= 0")
        return self


def _check_pair(image, mask):
    if image.shape != mask.shape:
        raise InvalidShapeError(f"image {image.shape} and mask {mask.shape} differ")


def random_flip(image, mask, axes_drawn):
    _check_pair(image, mask)
    axes = tuple(axes_drawn)
    if not axes:
        return image, mask
    return np.flip(image, axes).copy(), np.flip(mask, axes).copy()


def random_rot90(image, mask, axis_pair, k):
    _check_pair(image, mask)
    a, b = axis_pair
    if image.shape[a] != image.shape[b]:
        raise InvalidShapeError(
            f"rotation plane {axis_pair} has unequal extents {image.shape[a]} and {image.shape[b]}")
    k = int(k) % 4
    return (np.ascontiguousarray(np.rot90(image, k, axes=(a, b))),
            np.ascontiguousarray(np.rot90(mask, k, axes=(a, b))))


def displacement_field(shape, spacing, max_displacement, rng):
    """Coarse uniform random node displacements, trilinearly upsampled.

    Returns an array of shape ``(3,) + shape`` in voxel units.
    """
    nodes = [int(np.ceil((s - 1) / spacing)) + 1 for s in shape]
    coarse = rng.uniform(-max_displacement, max_displacement, size=(3, *nodes))
    coords = np.meshgrid(*[np.arange(s) / spacing for s in shape], indexing="ij")
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in coarse])


def warp(image, mask, displacement):
    """Sample image (trilinear) and mask (nearest) at grid + displacement, clamped."""
    _check_pair(image, mask)
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in image.shape], indexing="ij")
    coords = [g + d for g, d in zip(grid, displacement)]
    out_img = ndimage.map_coordinates(image, coords, order=1, mode="nearest").astype(image.dtype)
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="nearest").astype(mask.dtype)
    return out_img, out_mask


def elastic_deform(image, mask, cfg, seed):
    rng = np.random.default_rng(seed)
    field = displacement_field(image.shape, cfg.elastic_grid_spacing,
                               cfg.elastic_max_displacement, rng)
    return warp(image, mask, field)


def add_gaussian_noise(image, sigma, seed):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return image
    rng = np.random.default_rng(seed)
    return (image + rng.normal(0.0, sigma, size=image.shape)).astype(image.dtype)


def augment_sample(image, mask, cfg, seed):
    """flip -> rot90 -> elastic -> noise, all draws from one stream seeded by ``seed``.

    The decision draws are taken up front so switching one transform off does
    not change the parameters of the others.
    """
    _check_pair(image, mask)
    if not cfg.enabled:
        return image, mask
    rng = np.random.default_rng(seed)
    u = rng.random(6)
    plane_pick = int(rng.integers(len(ROT_PLANES)))
    k = int(rng.integers(1, 4))
    sub_seeds = rng.integers(0, 2 ** 63, size=2)

    axes = [ax for ax in range(3) if u[ax] < cfg.flip_prob]
    image, mask = random_flip(image, mask, axes)
    if u[3] < cfg.rot90_prob:
        planes = [p for p in ROT_PLANES if image.shape[p[0]] == image.shape[p[1]]]
        if planes:
            image, mask = random_rot90(image, mask, planes[plane_pick % len(planes)], k)
    if u[4] < cfg.elastic_prob and cfg.elastic_max_displacement > 0:
        image, mask = elastic_deform(image, mask, cfg, int(sub_seeds[0]))
    if u[5] < cfg.noise_prob:
        image = add_gaussian_noise(image, cfg.noise_sigma, int(sub_seeds[1]))
    return image, mask
