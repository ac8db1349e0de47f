"""Small input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted


class DegenerateError(ValueError):
    """Input geometry does not constrain the requested quantity."""


class DisconnectedError(ValueError):
    """A connected graph was required."""


def check_fitted(estimator, attributes) -> None:
    try:
        check_is_fitted(estimator, attributes)
    except NotFittedError:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first") from None


def check_unit_interval(x: float, name: str) -> float:
    if not (0.0 <= x <= 1.0) or np.isnan(x):
        raise ValueError(f"{name} must lie in [0, 1], got {x}")
    return x


def check_positive(x: float, name: str) -> float:
    if not x > 0:
        raise ValueError(f"{name} must be positive, got {x}")
    return x


def check_rotation(R, name: str = "rotation", tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError(f"{name} must be a finite 3x3 matrix")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or np.linalg.det(R) < 0:
        raise ValueError(f"{name} is not a rotation")
    return R
