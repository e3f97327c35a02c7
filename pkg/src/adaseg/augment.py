"""Conventional geometric and intensity augmentations.

Every geometric transform builds one backward coordinate map and samples
the image bilinearly and the mask with nearest neighbour through it, so
image and mask always move together. Out-of-bounds samples read 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import Dataset

COMPOSITION_ORDER = ("rotate", "shift", "scale", "elastic", "channel_shift")


@dataclass
class AugmentParams:
    rotation: tuple = (-4.6, 4.6)
    shift: tuple = (-0.03, 0.03)
    scale: tuple = (0.98, 1.02)
    channel_shift: tuple = (-0.17, 0.17)
    elastic_alpha: float = 30.0
    elastic_sigma: float = 4.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["order"] = ",".join(COMPOSITION_ORDER)
        return d


def _warp(image: np.ndarray, mask: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    coords = np.stack([rows, cols])
    img = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
    msk = ndimage.map_coordinates(mask.astype(np.float64), coords, order=0, mode="constant", cval=0.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32), (msk > 0.5).astype(np.uint8)


def _grid(shape):
    return np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)


def rotate(image, mask, degrees: float):
    """Rotate about the image centre by ``degrees`` (counter-clockwise on screen)."""
    if abs(degrees) > 360:
        raise ValueError(f"rotation angle must satisfy |degrees| <= 360, got {degrees}")
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = _grid(image.shape)
    t = np.deg2rad(np.remainder(degrees, 360.0))  # full turns map exactly onto the grid
    c, s = np.cos(t), np.sin(t)
    # inverse rotation of each output pixel
    src_r = cy + c * (rr - cy) - s * (cc - cx)
    src_c = cx + s * (rr - cy) + c * (cc - cx)
    return _warp(image, mask, src_r, src_c)


def shift(image, mask, dx_frac: float, dy_frac: float):
    """Integer translation by ``round(frac * n)`` pixels along each axis, zero filled."""
    if abs(dx_frac) > 1 or abs(dy_frac) > 1:
        raise ValueError("shift fractions must satisfy |frac| <= 1")
    h, w = image.shape
    dx = int(np.floor(dx_frac * w + 0.5))
    dy = int(np.floor(dy_frac * h + 0.5))
    img = np.zeros_like(image)
    msk = np.zeros_like(mask)
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    img[dst_r, dst_c] = image[src_r, src_c]
    msk[dst_r, dst_c] = mask[src_r, src_c]
    return img, msk


def scale(image, mask, factor: float):
    """Zoom about the centre by ``factor``, keeping the n x n frame."""
    if factor <= 0:
        raise ValueError("scale factor must be > 0")
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = _grid(image.shape)
    return _warp(image, mask, cy + (rr - cy) / factor, cx + (cc - cx) / factor)


def channel_shift(image, mask, delta: float):
    return np.clip(image + np.float32(delta), 0.0, 1.0).astype(np.float32), mask


def elastic_field(shape, alpha: float, sigma: float, rng: np.random.Generator):
    """Smoothed displacement fields (dy, dx), each bounded by ``alpha`` in magnitude."""
    if alpha < 0 or sigma <= 0:
        raise ValueError("elastic deformation needs alpha >= 0 and sigma > 0")
    raw_y = rng.uniform(-1.0, 1.0, size=shape)
    raw_x = rng.uniform(-1.0, 1.0, size=shape)
    dy = ndimage.gaussian_filter(raw_y, sigma, mode="constant", cval=0.0, truncate=3.0) * alpha
    dx = ndimage.gaussian_filter(raw_x, sigma, mode="constant", cval=0.0, truncate=3.0) * alpha
    return dy, dx


def elastic_deform(image, mask, alpha: float = 30.0, sigma: float = 4.0,
                   rng: Optional[np.random.Generator] = None):
    if rng is None:
        rng = np.random.default_rng(0)
    dy, dx = elastic_field(image.shape, alpha, sigma, rng)
    if alpha == 0:
        return image.copy(), mask.copy()
    rr, cc = _grid(image.shape)
    return _warp(image, mask, rr + dy, cc + dx)


def augment_one(image, mask, params: AugmentParams, rng: np.random.Generator):
    """Draw every parameter uniformly and apply the five transforms in fixed order."""
    deg = rng.uniform(*params.rotation)
    sx = rng.uniform(*params.shift)
    sy = rng.uniform(*params.shift)
    fac = rng.uniform(*params.scale)
    delta = rng.uniform(*params.channel_shift)
    image, mask = rotate(image, mask, deg)
    image, mask = shift(image, mask, sx, sy)
    image, mask = scale(image, mask, fac)
    image, mask = elastic_deform(image, mask, params.elastic_alpha, params.elastic_sigma, rng)
    return channel_shift(image, mask, delta)


def classic_augmentations(data: Dataset, params: Optional[AugmentParams] = None,
                          rng: Optional[np.random.Generator] = None) -> Dataset:
    """One independently drawn augmented copy per sample."""
    params = params or AugmentParams()
    if rng is None:
        rng = np.random.default_rng(0)
    seeds = rng.integers(0, 2 ** 63 - 1, size=len(data))
    images = np.empty_like(data.images)
    masks = np.empty_like(data.masks)
    for i in range(len(data)):
        images[i], masks[i] = augment_one(data.images[i], data.masks[i], params, np.random.default_rng(seeds[i]))
    return Dataset([f"{sid}_aug" for sid in data.ids], images, masks, data.split)
