"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


def check_gray_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a 2-D float64 array with values in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be non-empty, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    elif arr.dtype == np.uint16:
        arr = arr / 65535.0
    else:
        arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_unit_rows(vectors: np.ndarray, name: str, allow_zero: bool = False,
                    atol: float = 1e-6) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1)
    bad = np.abs(norms - 1.0) > atol
    if allow_zero:
        bad &= norms > 0.0
    if np.any(bad):
        raise ValueError(f"{name} must contain unit-norm vectors")
    return vectors


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0.0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return value


def check_odd(value: int, name: str) -> int:
    value = int(value)
    if value < 1 or value % 2 == 0:
        raise ValueError(f"{name} must be a positive odd integer, got {value}")
    return value
