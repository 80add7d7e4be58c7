"""PQ61 packed layer container, packed forward pass and bit-width accounting.

Container layout (little-endian)::

    b"PQ61" u32 version u32 m u32 n u32 k u32 section_count
    section_count x (u32 id, u64 offset, u64 length)
    sections: mask, nibbles, affine-params, signs, alpha-s, alpha-r1, alpha-r2

* mask: ceil(m/8) bytes, bit i of the vector at byte i//8, bit i%8 (LSB first)
* nibbles: k rows x ceil(n/2) bytes, even column in the low nibble
* affine-params: k float16 scales followed by k float16 zero-points
* signs: (m-k) rows x ceil(n/8) bytes, LSB first, set bit = +1
* alpha-s, alpha-r1: m float16 each; alpha-r2: n float16

Offsets are absolute. Sections are contiguous and the file ends with the last
one.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import ConfigError, FormatError, ShapeError
from .numerics import as_matrix
from .quant import QuantizedLayer, ScalingVectors
from .saliency import ChannelMask

MAGIC = b"PQ61"
VERSION = 1
SECTIONS = ("mask", "nibbles", "affine-params", "signs", "alpha-s", "alpha-r1", "alpha-r2")
_HEADER = struct.Struct("<4sIIIII")
_ENTRY = struct.Struct("<IQQ")
_U32_MAX = 2**32 - 1
_F16 = np.dtype("<f2")


@dataclass
class PackedLayer:
    m: int
    n: int
    k: int
    mask: np.ndarray        # uint8 (ceil(m/8),)
    nibbles: np.ndarray     # uint8 (k, ceil(n/2))
    scales: np.ndarray      # float16 (k,)
    zeros: np.ndarray       # float16 (k,)
    signs: np.ndarray       # uint8 (m-k, ceil(n/8))
    alpha_s: np.ndarray     # float16 (m,)
    alpha_r1: np.ndarray    # float16 (m,)
    alpha_r2: np.ndarray    # float16 (n,)
    version: int = VERSION

    def mask_bits(self) -> np.ndarray:
        return np.unpackbits(self.mask, bitorder="little")[: self.m].astype(bool)

    def section_bytes(self) -> dict:
        return {
            "mask": self.mask.tobytes(),
            "nibbles": self.nibbles.tobytes(),
            "affine-params": self.scales.astype(_F16).tobytes() + self.zeros.astype(_F16).tobytes(),
            "signs": self.signs.tobytes(),
            "alpha-s": self.alpha_s.astype(_F16).tobytes(),
            "alpha-r1": self.alpha_r1.astype(_F16).tobytes(),
            "alpha-r2": self.alpha_r2.astype(_F16).tobytes(),
        }

    def to_bytes(self) -> bytes:
        body = self.section_bytes()
        offset = _HEADER.size + _ENTRY.size * len(SECTIONS)
        table, payload = [], []
        for sid, name in enumerate(SECTIONS, start=1):
            data = body[name]
            table.append(_ENTRY.pack(sid, offset, len(data)))
            payload.append(data)
            offset += len(data)
        head = _HEADER.pack(MAGIC, self.version, self.m, self.n, self.k, len(SECTIONS))
        return head + b"".join(table) + b"".join(payload)


def _section_sizes(m: int, n: int, k: int) -> dict:
    return {
        "mask": (m + 7) // 8,
        "nibbles": k * ((n + 1) // 2),
        "affine-params": 4 * k,
        "signs": (m - k) * ((n + 7) // 8),
        "alpha-s": 2 * m,
        "alpha-r1": 2 * m,
        "alpha-r2": 2 * n,
    }


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    k, n = codes.shape
    padded = np.zeros((k, n + (n & 1)), dtype=np.uint8)
    padded[:, :n] = codes
    return padded[:, 0::2] | (padded[:, 1::2] << 4)


def unpack_nibbles(nib: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((nib.shape[0], 2 * nib.shape[1]), dtype=np.uint8)
    out[:, 0::2] = nib & 0x0F
    out[:, 1::2] = nib >> 4
    return out[:, :n]


def pack_signs(signs: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(signs, dtype=bool), axis=1, bitorder="little")


def unpack_signs(plane: np.ndarray, n: int) -> np.ndarray:
    return np.unpackbits(plane, axis=1, bitorder="little")[:, :n].astype(bool)


def _half(v, name) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = np.asarray(v, dtype=np.float64).astype(_F16)
    if not np.all(np.isfinite(h)):
        raise FormatError(f"{name} overflows float16 storage")
    return h


def to_packed(q: QuantizedLayer) -> PackedLayer:
    q.check()
    m, n = q.shape
    k = q.mask.k
    if max(m, n, k) > _U32_MAX:
        raise FormatError("layer dimensions overflow the u32 header fields")
    if k and q.codes.max() > 15:
        raise FormatError(f"codes exceed the 4-bit nibble range (bit-width {q.bits})")
    s = q.scaling
    return PackedLayer(
        m, n, k,
        mask=np.packbits(q.mask.bits, bitorder="little"),
        nibbles=pack_nibbles(q.codes.reshape(k, n)),
        scales=_half(q.scales, "salient scales"),
        zeros=_half(q.zeros, "zero-points"),
        signs=pack_signs(q.signs.reshape(m - k, n)),
        alpha_s=_half(s.alpha_s, "alpha_s"),
        alpha_r1=_half(s.alpha_r1, "alpha_r1"),
        alpha_r2=_half(s.alpha_r2, "alpha_r2"),
    )


def pack(q: QuantizedLayer) -> bytes:
    return to_packed(q).to_bytes()


def parse(data: bytes) -> PackedLayer:
    """Validate a PQ61 byte string and return its packed sections."""
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, m, n, k, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if m < 1 or n < 1 or k > m:
        raise FormatError(f"invalid dimensions m={m} n={n} k={k}", offset=8)
    if count != len(SECTIONS):
        raise FormatError(f"expected {len(SECTIONS)} sections, found {count}", offset=20)
    sizes = _section_sizes(m, n, k)
    pos = _HEADER.size
    expected_off = pos + _ENTRY.size * count
    if len(data) < expected_off:
        raise FormatError("truncated section table", offset=len(data))
    raw = {}
    for sid, name in enumerate(SECTIONS, start=1):
        got_id, off, length = _ENTRY.unpack_from(data, pos)
        if got_id != sid:
            raise FormatError(f"section {sid} ({name}) has id {got_id}", offset=pos)
        if length != sizes[name]:
            raise FormatError(f"section {name} is {length} bytes, expected {sizes[name]}", offset=pos + 12)
        if off != expected_off:
            raise FormatError(f"section {name} starts at {off}, expected {expected_off}", offset=pos + 4)
        if off + length > len(data):
            raise FormatError(f"section {name} runs past end of data", offset=len(data))
        raw[name] = data[off: off + length]
        expected_off = off + length
        pos += _ENTRY.size
    if expected_off != len(data):
        raise FormatError(f"{len(data) - expected_off} trailing bytes", offset=expected_off)

    u8 = lambda b, shape: np.frombuffer(b, dtype=np.uint8).reshape(shape).copy()
    f16 = lambda b: np.frombuffer(b, dtype=_F16).copy()
    affine = f16(raw["affine-params"])
    p = PackedLayer(
        m, n, k,
        mask=u8(raw["mask"], ((m + 7) // 8,)),
        nibbles=u8(raw["nibbles"], (k, (n + 1) // 2)),
        scales=affine[:k], zeros=affine[k:],
        signs=u8(raw["signs"], (m - k, (n + 7) // 8)),
        alpha_s=f16(raw["alpha-s"]), alpha_r1=f16(raw["alpha-r1"]), alpha_r2=f16(raw["alpha-r2"]),
        version=version,
    )
    bits = p.mask_bits()
    if int(bits.sum()) != k:
        raise FormatError(f"mask popcount {int(bits.sum())} != k={k}", offset=_HEADER.size + _ENTRY.size * count)
    return p


def from_packed(p: PackedLayer) -> QuantizedLayer:
    bits = p.mask_bits()
    scaling = ScalingVectors(p.alpha_s.astype(np.float64), p.alpha_r1.astype(np.float64),
                             p.alpha_r2.astype(np.float64))
    q = QuantizedLayer(
        mask=ChannelMask.from_bits(bits),
        codes=unpack_nibbles(p.nibbles, p.n),
        scales=p.scales.astype(np.float64),
        zeros=p.zeros.astype(np.float64),
        signs=unpack_signs(p.signs, p.n),
        scaling=scaling,
        bits=4,
        shape=(p.m, p.n),
    )
    q.check()
    return q


def unpack(data: bytes) -> QuantizedLayer:
    return from_packed(parse(data))


def packed_forward(X, p) -> np.ndarray:
    """``X @ dequantize(p)`` computed directly on the packed planes.

    Binarized rows: the rank-1 row/column scales factor out, so the sign plane
    is accumulated against ``X * alpha_s * alpha_r1`` and the result rescaled
    by ``alpha_r2``. Salient rows: codes are accumulated against ``X * scale``
    and the zero-point contribution subtracted once per output.
    """
    if isinstance(p, (bytes, bytearray, memoryview)):
        p = parse(p)
    X = as_matrix(X, "activations")
    if X.shape[1] != p.m:
        raise ShapeError(f"activations have {X.shape[1]} channels, layer expects {p.m}")
    bits = p.mask_bits()
    sal = np.flatnonzero(bits)
    rest = np.flatnonzero(~bits)
    a_s = p.alpha_s.astype(np.float64)
    a_r1 = p.alpha_r1.astype(np.float64)
    a_r2 = p.alpha_r2.astype(np.float64)
    out = np.zeros((X.shape[0], p.n))
    if rest.size:
        u = X[:, rest] * (a_s[rest] * a_r1[rest])
        out += kernels.sign_matmul(u, p.signs, p.n) * a_r2
    if sal.size:
        v = X[:, sal] * p.scales.astype(np.float64)
        out += kernels.nibble_matmul(v, p.nibbles, p.n)
        out -= (v @ p.zeros.astype(np.float64))[:, None]
    return out


def section_digests(data: bytes) -> dict:
    p = parse(data)
    return {name: hashlib.sha256(b).hexdigest() for name, b in p.section_bytes().items()}


def describe(data: bytes) -> dict:
    p = parse(data)
    sizes = _section_sizes(p.m, p.n, p.k)
    acc = bit_accounting(p.m, p.n, p.k / p.m) if 0 < p.k < p.m else None
    return {
        "version": p.version, "m": p.m, "n": p.n, "k": p.k, "bytes": len(data),
        "sections": [{"id": i, "name": s, "length": sizes[s]} for i, s in enumerate(SECTIONS, 1)],
        "digests": section_digests(data),
        "storage_bits_per_weight": 8 * len(data) / (p.m * p.n),
        "accounting": acc.as_dict() if acc else None,
    }


# --------------------------------------------------------------------------
# bit-width accounting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BitAccounting:
    m: int
    n: int
    ratio: float
    salient_bits: float
    weight_bits: float
    index_bits: float
    additional_bits: float
    total: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _frac(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def bit_accounting(m, n, ratio, salient_bits=4, scale_width=16, zero_width=16,
                   n_scale_vectors=3) -> BitAccounting:
    """Average bits per weight of a layer with a one-dimensional row mask.

    Payload is ``(1 - p) + b_salient * p`` bits per weight; the mask costs one
    bit per row; parameters are ``n_scale_vectors`` length-``m`` vectors plus
    one zero-point per salient row. Computed in exact rationals.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"salient ratio must lie in (0, 1), got {ratio}")
    if m < 1 or n < 1 or salient_bits < 1:
        raise ConfigError("invalid layer shape or bit-width")
    p = _frac(ratio)
    b = _frac(salient_bits)
    weight = (1 - p) + b * p
    total_bits = m * n * weight
    index = Fraction(m) / total_bits
    additional = (n_scale_vectors * m * _frac(scale_width) + p * m * _frac(zero_width)) / total_bits
    return BitAccounting(m, n, float(ratio), float(salient_bits), float(weight), float(index),
                         float(additional), float(weight + index + additional))


def unstructured_accounting(weight_bits, additional_bits=0, mask_bits=1) -> float:
    """Average bits when a per-weight mask is stored alongside the payload."""
    return float(_frac(weight_bits) + _frac(additional_bits) + _frac(mask_bits))


PRESETS = {
    "saltbin": lambda: bit_accounting(4096, 4096, 0.2).total,
    "pb-llm": lambda: unstructured_accounting(Fraction(1, 10) * 8 + Fraction(9, 10) * 1, 0, 1),
    "billm": lambda: unstructured_accounting(1, Fraction(1, 10), 1),
}
