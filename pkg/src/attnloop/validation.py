"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError


def check_series_array(X, T: int | None = None, D: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 (N, T, D) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeError(f"expected a 3-D (N, T, D) array, got shape {X.shape}")
    if T is not None and X.shape[1] != T:
        raise ShapeError(f"expected T={T} timesteps, got {X.shape[1]}")
    if D is not None and X.shape[2] != D:
        raise ShapeError(f"expected D={D} features, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains non-finite values")
    return X


def check_label_array(y, task: str, n: int, L: int | None = None) -> np.ndarray:
    """Coerce labels to a float64 (N, L) array valid for the task."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n:
        raise ShapeError(f"expected ({n}, L) labels, got {y.shape}")
    if L is not None and y.shape[1] != L:
        raise ShapeError(f"expected L={L} outputs, got {y.shape[1]}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("y contains non-finite values")
    if task == "binary" and not np.all(np.isin(y, (0.0, 1.0))):
        raise ValidationError("binary labels must be 0/1")
    if task == "multiclass":
        if not (np.all(np.isin(y, (0.0, 1.0))) and np.allclose(y.sum(axis=1), 1.0)):
            raise ValidationError("multiclass labels must be one-hot rows")
    return y


def onehot_from_class_ids(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y).astype(int).ravel()
    if y.min() < 0 or y.max() >= n_classes:
        raise ValidationError("class ids out of range")
    return np.eye(n_classes)[y]
