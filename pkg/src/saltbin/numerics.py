"""Dense numeric primitives.

Weight matrices are stored input-channel-major: a layer with ``m`` input
channels and ``n`` output features is an ``(m, n)`` array and the layer output
is ``X @ W``. All arithmetic is float64.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError, DataError


def as_matrix(a, name="matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def as_vector(a, name="vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def matmul(X, W) -> np.ndarray:
    X = as_matrix(X, "activations")
    W = as_matrix(W, "weights")
    if X.shape[1] != W.shape[0]:
        raise ShapeError(f"cannot multiply {X.shape} activations by {W.shape} weights")
    return X @ W


def _pair(f1, f2):
    a = np.asarray(f1, dtype=np.float64).ravel()
    b = np.asarray(f2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def cosine_similarity(f1, f2) -> float:
    """Cosine of the angle between two features (flattened row-major)."""
    a, b = _pair(f1, f2)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def l2_distance(f1, f2) -> float:
    a, b = _pair(f1, f2)
    return float(np.linalg.norm(a - b))
