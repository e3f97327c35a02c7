"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

from typing import Optional

import numpy as np


def check_images(X, n: Optional[int] = None) -> np.ndarray:
    """Return ``X`` as float32 ``[N, n, n]`` with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images of shape [N, n, n], got {X.shape}")
    if n is not None and X.shape[1] != n:
        raise ValueError(f"expected images of size {n}x{n}, got {X.shape[1]}x{X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("image intensities must lie in [0, 1]")
    return X


def check_masks(y, shape: Optional[tuple] = None) -> np.ndarray:
    """Return ``y`` as uint8 with values in {0, 1}."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary (0/1)")
    y = y.astype(np.uint8)
    if shape is not None and y.shape != tuple(shape):
        raise ValueError(f"masks of shape {y.shape} do not match images {tuple(shape)}")
    return y


def check_image_mask_pair(X, y):
    X = check_images(X)
    return X, check_masks(y, X.shape)
