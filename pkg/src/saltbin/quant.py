"""Salient-row affine quantization, sign binarization and dequantization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, IntegrityError, ShapeError, ConfigError
from .numerics import as_matrix, as_vector
from .saliency import ChannelMask

SUPPORTED_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class AffineRowParams:
    scale: float
    zero: int
    bits: int = 4


def affine_quantize_row(w, bits: int = 4):
    """Min-max uniform quantization of one row.

    Returns ``(codes, AffineRowParams)``; a code ``c`` dequantizes to
    ``(c - zero) * scale``.
    """
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    try:
        w = as_vector(w, "row")
    except DataError as exc:
        raise DataError(f"cannot quantize row: {exc}") from None
    qmax = (1 << bits) - 1
    lo, hi = float(w.min()), float(w.max())
    scale = (hi - lo) / qmax if hi > lo else 1.0
    zero = int(np.clip(np.round(-lo / scale), 0, qmax))
    codes = np.clip(np.round(w / scale) + zero, 0, qmax).astype(np.uint8)
    return codes, AffineRowParams(scale, zero, bits)


def affine_dequantize_row(codes, params: AffineRowParams) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) - params.zero) * params.scale


def binarize_row(w):
    """Sign bits (True for w >= 0) and the L2-optimal scale mean(|w|)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ShapeError("binarize_row needs a non-empty 1-D row")
    return w >= 0, float(np.abs(w).mean())


@dataclass
class ScalingVectors:
    alpha_s: np.ndarray
    alpha_r1: np.ndarray
    alpha_r2: np.ndarray

    def copy(self) -> "ScalingVectors":
        return ScalingVectors(self.alpha_s.copy(), self.alpha_r1.copy(), self.alpha_r2.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.alpha_s, self.alpha_r1, self.alpha_r2])

    @classmethod
    def from_flat(cls, v, m: int, n: int) -> "ScalingVectors":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:m].copy(), v[m:2 * m].copy(), v[2 * m:2 * m + n].copy())


@dataclass
class QuantizedLayer:
    """Mixed-precision layer.

    Salient rows (in ascending row order) hold unsigned codes with one
    scale/zero-point pair each; all other rows hold sign bits and are
    rescaled by ``alpha_s[i] * alpha_r1[i] * alpha_r2[j]``.
    """

    mask: ChannelMask
    codes: np.ndarray          # (k, n) uint8
    scales: np.ndarray         # (k,)
    zeros: np.ndarray          # (k,) integer-valued
    signs: np.ndarray          # (m - k, n) bool, True = +1
    scaling: ScalingVectors
    bits: int = 4
    shape: tuple = field(default=(0, 0))

    @property
    def salient_rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask.bits)

    @property
    def binary_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.mask.bits)

    def with_scaling(self, scaling: ScalingVectors) -> "QuantizedLayer":
        return QuantizedLayer(self.mask, self.codes, self.scales, self.zeros, self.signs,
                              scaling, self.bits, self.shape)

    def check(self) -> None:
        m, n = self.shape
        k = self.mask.k
        if self.mask.m != m:
            raise IntegrityError(f"mask length {self.mask.m} != {m} rows")
        if self.codes.shape != (k, n) or self.scales.shape != (k,) or self.zeros.shape != (k,):
            raise IntegrityError("salient branch does not match the mask")
        if self.signs.shape != (m - k, n):
            raise IntegrityError("sign plane does not match the mask")
        s = self.scaling
        if s.alpha_s.shape != (m,) or s.alpha_r1.shape != (m,) or s.alpha_r2.shape != (n,):
            raise IntegrityError("scaling vectors have the wrong length")
        if k and (self.codes.max(initial=0) > (1 << self.bits) - 1):
            raise IntegrityError("code out of range for the bit-width")
        for name, v in (("scales", self.scales), ("zeros", self.zeros), ("alpha_s", s.alpha_s),
                        ("alpha_r1", s.alpha_r1), ("alpha_r2", s.alpha_r2)):
            if not np.all(np.isfinite(v)):
                raise IntegrityError(f"non-finite {name}")


def quantize_layer(W, mask, bits: int = 4) -> QuantizedLayer:
    W = as_matrix(W, "weights")
    if not isinstance(mask, ChannelMask):
        mask = ChannelMask.from_bits(mask)
    m, n = W.shape
    if mask.m != m:
        raise ShapeError(f"mask length {mask.m} does not match {m} weight rows")
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit-width {bits}")
    sal = np.flatnonzero(mask.bits)
    rest = np.flatnonzero(~mask.bits)
    codes = np.zeros((sal.size, n), dtype=np.uint8)
    scales = np.zeros(sal.size)
    zeros = np.zeros(sal.size)
    for r, i in enumerate(sal):
        codes[r], p = affine_quantize_row(W[i], bits)
        scales[r], zeros[r] = p.scale, p.zero
    signs = np.zeros((rest.size, n), dtype=bool)
    alpha_s = np.zeros(m)
    for r, i in enumerate(rest):
        signs[r], alpha_s[i] = binarize_row(W[i])
    scaling = ScalingVectors(alpha_s, np.ones(m), np.ones(n))
    return QuantizedLayer(mask, codes, scales, zeros, signs, scaling, bits, (m, n))


def dequantize(q: QuantizedLayer) -> np.ndarray:
    q.check()
    m, n = q.shape
    out = np.empty((m, n))
    out[q.salient_rows] = (q.codes.astype(np.float64) - q.zeros[:, None]) * q.scales[:, None]
    rest = q.binary_rows
    s = q.scaling
    pm = np.where(q.signs, 1.0, -1.0)
    out[rest] = (s.alpha_s[rest] * s.alpha_r1[rest])[:, None] * s.alpha_r2[None, :] * pm
    return out
