"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np


def check_images(X, input_px: int | None = None, require_pow2: bool = False) -> np.ndarray:
    """Validate (N, 3, H, W) square images with finite values in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if input_px is not None and X.shape[2] != input_px:
        raise ValueError(f"expected {input_px} px images, got {X.shape[2]} px")
    if require_pow2 and X.shape[2] & (X.shape[2] - 1):
        raise ValueError(f"image side {X.shape[2]} is not a power of two")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if X.size and (not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1):
        raise ValueError("image values must be finite and lie in [0, 1]")
    return X


def check_grids(y, mask=None, n_samples: int | None = None):
    """Validate (N, C, H', W') grids and an optional (N, H', W') mask.

    Returns ``(grids, mask)`` with an all-true mask when none is given.
    """
    y = np.asarray(y, dtype=np.float64 if np.asarray(y).dtype == np.float64 else np.float32)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4:
        raise ValueError(f"expected grids of shape (N, C, H', W'), got {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"{y.shape[0]} grids for {n_samples} images")
    if not np.all(np.isfinite(y)):
        raise ValueError("expression grids contain non-finite values")
    if mask is None:
        mask = np.ones((y.shape[0],) + y.shape[2:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape != (y.shape[0],) + y.shape[2:]:
        raise ValueError(f"mask shape {mask.shape} does not match grids {y.shape}")
    return y, mask


def check_spot_targets(y, n_samples: int | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2:
        raise ValueError(f"expected (N, C) spot targets, got {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"{y.shape[0]} targets for {n_samples} patches")
    if not np.all(np.isfinite(y)):
        raise ValueError("spot targets contain non-finite values")
    return y
