"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array


def check_matrix(X, name: str = "X") -> np.ndarray:
    """2-D finite float array with at least one row."""
    return check_array(X, dtype=float, ensure_2d=True, input_name=name)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be a number in [0, 1], got {value!r}")
    return float(value)
