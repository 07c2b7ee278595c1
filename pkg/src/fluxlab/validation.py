"""Input-validation helpers shared by the public surfaces of the package."""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_matrix",
    "as_vector",
    "check_finite",
    "check_simplex",
    "check_unit_interval",
    "check_positive",
]


def as_matrix(X, name="X", dtype=np.float64):
    """Coerce to a 2D float array, rejecting ragged or empty input."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2D array, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one row")
    return X


def as_vector(x, name="x", dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a 1D array, got shape {x.shape}")
    return x


def check_finite(x, name="input"):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_simplex(w, name="weights", tol=1e-6):
    """Validate a vector (or batch of row vectors) on the probability simplex."""
    w = np.asarray(w, dtype=np.float64)
    sums = w.sum(axis=-1)
    if np.any(w < -tol) or np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{name} is not on the simplex (tolerance {tol})")
    return w


def check_unit_interval(t, name="t"):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return t


def check_positive(value, name="value"):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
