"""Input validation helpers used at every public entry point."""
from __future__ import annotations

import numpy as np

from .exceptions import DataError, DimensionError, NumericError, ParameterError


def as_matrix(x, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """Coerce to a finite float64 2-D array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise DataError(f"{name} needs at least {min_rows} rows, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


def as_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise ParameterError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_nonnegative(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v < 0:
        raise ParameterError(f"{name} must be finite and >= 0, got {value}")
    return v


def check_unit_interval(value, name: str) -> float:
    v = float(value)
    if not (0.0 <= v <= 1.0):
        raise ParameterError(f"{name} must lie in [0, 1], got {value}")
    return v


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return arr
