"""Small input-validation helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fitted(estimator, attr: str) -> None:
    if not hasattr(estimator, attr):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit() first")


def check_matrix(x, name: str = "vectors", dim=None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has dim {arr.shape[1]}, expected {dim}")
    return arr


def query_text(query) -> str:
    """Accept a Query-like object or a plain string."""
    return query if isinstance(query, str) else query.text
