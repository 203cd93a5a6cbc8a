"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigError


def check_images(X, side: int | None = None) -> np.ndarray:
    """Coerce to an ``(N, H, W, 3)`` uint8 array of square images.

    Float input is accepted when it lies in [0, 1] and is rescaled to 0..255.
    """
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if len(X) == 0:
        raise ValueError("found an empty image array")
    if side is not None and X.shape[1] != side:
        raise ValueError(f"expected {side}x{side} images, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype == np.uint8:
        return X
    if np.issubdtype(X.dtype, np.floating):
        if not np.isfinite(X).all() or X.min() < 0 or X.max() > 1:
            raise ValueError("float images must be finite and lie in [0, 1]")
        return np.round(X * 255).astype(np.uint8)
    if np.issubdtype(X.dtype, np.integer):
        if X.min() < 0 or X.max() > 255:
            raise ValueError("integer images must lie in 0..255")
        return X.astype(np.uint8)
    raise ValueError(f"unsupported image dtype {X.dtype}")


def check_features(X) -> np.ndarray:
    return check_array(X, dtype=np.float32, ensure_2d=True)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    return y.astype(np.int64)


def check_positive(name: str, value) -> None:
    if value is None or value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")
