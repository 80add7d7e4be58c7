"""Activation-driven channel saliency and the one-dimensional row mask."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError
from .numerics import as_matrix

KINDS = ("mean-abs", "max-abs", "l2")


@dataclass(frozen=True)
class ChannelSaliency:
    scores: np.ndarray
    kind: str = "mean-abs"


@dataclass(frozen=True)
class ChannelMask:
    """Salient input channels. ``bits[i]`` is True when row ``i`` stays 4-bit."""

    bits: np.ndarray
    ratio: float

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 1 or bits.size < 1:
            raise ShapeError(f"mask must be a non-empty 1-D bit vector, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def k(self) -> int:
        return int(self.bits.sum())

    @property
    def m(self) -> int:
        return int(self.bits.size)

    @classmethod
    def from_bits(cls, bits) -> "ChannelMask":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits, float(bits.sum()) / max(bits.size, 1))


def _stack(X) -> np.ndarray:
    if isinstance(X, (list, tuple)):
        if not X:
            raise DegenerateInputError("empty calibration set")
        if np.ndim(X[0]) != 2:
            return _stack(np.asarray(X, dtype=np.float64))
        return np.concatenate([as_matrix(x, "activations") for x in X], axis=0)
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[0] == 0:
        raise DegenerateInputError("empty activation batch")
    return as_matrix(arr, "activations")


def channel_saliency(X, kind: str = "mean-abs") -> ChannelSaliency:
    """Per-input-channel activation magnitude.

    ``X`` is a ``(tokens, channels)`` batch or a list of such batches, which are
    pooled over tokens.
    """
    X = _stack(X)
    a = np.abs(X)
    if kind == "mean-abs":
        scores = a.mean(axis=0)
    elif kind == "max-abs":
        scores = a.max(axis=0)
    elif kind == "l2":
        scores = np.sqrt((X * X).sum(axis=0))
    else:
        raise ConfigError(f"unknown saliency statistic {kind!r}; expected one of {KINDS}")
    return ChannelSaliency(scores, kind)


def salient_count(m: int, ratio: float) -> int:
    k = math.floor(ratio * m + 0.5)
    return min(max(k, 1), m - 1) if m > 1 else 1


def _top_indices(values: np.ndarray, count: int) -> np.ndarray:
    # stable sort on the negated values keeps lower indices first among ties
    return np.argsort(-values, kind="stable")[:count]


def build_mask(saliency, ratio: float) -> ChannelMask:
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"salient ratio must lie in (0, 1), got {ratio}")
    scores = saliency.scores if isinstance(saliency, ChannelSaliency) else np.asarray(saliency, dtype=np.float64)
    m = scores.size
    k = salient_count(m, ratio)
    bits = np.zeros(m, dtype=bool)
    bits[_top_indices(scores, k)] = True
    return ChannelMask(bits, ratio)


def weight_saliency_map(W, ratio: float) -> np.ndarray:
    """Boolean map of the globally largest ``ceil(ratio * m * n)`` entries of ``|W|``."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must lie in (0, 1), got {ratio}")
    W = as_matrix(W, "weights")
    count = max(1, math.ceil(ratio * W.size - 1e-9))
    flat = np.zeros(W.size, dtype=bool)
    flat[_top_indices(np.abs(W).ravel(), count)] = True
    return flat.reshape(W.shape)


def layer_error_and_bound(X, W, Wq):
    """Elementwise output error ``|X (Wq - W)|`` and its triangle-inequality bound.

    Bound entry ``(a, b)`` is ``sum_i |X[a, i]| * |Wq[i, b] - W[i, b]|``, so the
    error never exceeds it.
    """
    X = as_matrix(X, "activations")
    W = as_matrix(W, "weights")
    Wq = as_matrix(Wq, "quantized weights")
    if W.shape != Wq.shape:
        raise ShapeError(f"weight shapes differ: {W.shape} vs {Wq.shape}")
    if X.shape[1] != W.shape[0]:
        raise ShapeError(f"activations {X.shape} do not match weights {W.shape}")
    delta = Wq - W
    return np.abs(X @ delta), np.abs(X) @ np.abs(delta)
