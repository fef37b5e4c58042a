"""Input checks for the estimators."""
from __future__ import annotations

import numpy as np

from .slices import SPACING_SCALE


def check_images(X, input_size) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected images shaped (n, H, W), got {X.shape}")
    if X.shape[1:] != tuple(input_size):
        raise ValueError(f"expected images of size {tuple(input_size)}, got {X.shape[1:]}")
    if len(X) == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_targets(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) != n:
        raise ValueError(f"got {len(y)} targets for {n} images")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain NaN or Inf")
    if np.any(y < 0):
        raise ValueError("calcium scores must be non-negative")
    return y


def check_spacing(spacing, n) -> np.ndarray:
    """Voxel-spacing features; defaults to 1 mm isotropic."""
    if spacing is None:
        return np.full((n, 3), SPACING_SCALE)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape == (3,):
        spacing = np.tile(spacing, (n, 1))
    if spacing.shape != (n, 3):
        raise ValueError(f"spacing features must be shaped ({n}, 3), got {spacing.shape}")
    return spacing
