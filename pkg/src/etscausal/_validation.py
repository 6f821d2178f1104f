"""Input validation helpers for the estimator classes."""

import numpy as np

from .errors import EstimationError


def as_float_vector(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def as_float_matrix(X, name="X"):
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr, name="input"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_same_length(n, x, name="input"):
    if len(x) != n:
        raise ValueError(f"{name} has length {len(x)}, expected {n}")
    return x


def check_binary_indicator(d, name="treated"):
    """Coerce a treatment indicator to an int array of 0/1 values."""
    arr = np.asarray(d)
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"{name} must contain only 0/1 values, got {values!r}")
    return arr.astype(int)

def require_both_classes(d, name="treated"):
    d = check_binary_indicator(d, name)
    if d.min() == d.max():
        raise EstimationError(
            f"{name} contains a single class; need both treated and control units"
        )
    return d
