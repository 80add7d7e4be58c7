import struct

import numpy as np
import pytest

from saltbin import _kernels_py, kernels, packfmt
from saltbin.errors import ConfigError, FormatError, ShapeError
from saltbin.quant import ScalingVectors, dequantize, quantize_layer
from saltbin.saliency import ChannelMask, build_mask


def random_layer(rng, m, n, ratio=0.25):
    W = rng.normal(size=(m, n))
    q = quantize_layer(W, build_mask(rng.random(m), ratio))
    s = q.scaling
    return q.with_scaling(ScalingVectors(s.alpha_s, rng.uniform(0.5, 1.5, m), rng.uniform(0.5, 1.5, n)))


def test_sign_bit_order():
    signs = np.array([[True, False] * 4])
    assert packfmt.pack_signs(signs).tolist() == [[0x55]]
    assert packfmt.unpack_signs(np.array([[0x55]], dtype=np.uint8), 8).tolist() == signs.tolist()


def test_nibble_order():
    assert packfmt.pack_nibbles(np.array([[0, 15]])).tolist() == [[0xF0]]
    assert packfmt.pack_nibbles(np.array([[3, 4, 5]])).tolist() == [[0x43, 0x05]]
    assert packfmt.unpack_nibbles(np.array([[0x43, 0x05]], dtype=np.uint8), 3).tolist() == [[3, 4, 5]]


def test_header_layout(rng):
    q = random_layer(rng, 10, 7, 0.3)
    data = packfmt.pack(q)
    magic, version, m, n, k, count = struct.unpack_from("<4sIIIII", data, 0)
    assert (magic, version, m, n, k, count) == (b"PQ61", 1, 10, 7, 3, 7)
    off = 24 + 7 * 20
    for sid in range(1, 8):
        got, start, length = struct.unpack_from("<IQQ", data, 24 + 20 * (sid - 1))
        assert got == sid and start == off
        off += length
    assert off == len(data)
    # mask byte 0 holds rows 0..7 LSB-first
    mask_row_bits = np.unpackbits(np.frombuffer(data[164:166], np.uint8), bitorder="little")[:10]
    assert mask_row_bits.astype(bool).tolist() == q.mask.bits.tolist()


@pytest.mark.parametrize("shape", [(1, 1), (2, 1), (9, 3), (17, 16), (33, 65)])
def test_roundtrip_exact(rng, shape):
    m, n = shape
    for _ in range(5):
        q = random_layer(rng, m, n, rng.uniform(0.05, 0.95))
        data = packfmt.pack(q)
        back = packfmt.unpack(data)
        assert np.array_equal(back.mask.bits, q.mask.bits)
        assert np.array_equal(back.codes, q.codes)
        assert np.array_equal(back.signs, q.signs)
        f16 = lambda v: np.asarray(v).astype(np.float16).astype(np.float64)
        assert np.array_equal(back.scales, f16(q.scales))
        assert np.array_equal(back.zeros, f16(q.zeros))
        assert np.array_equal(back.scaling.alpha_r2, f16(q.scaling.alpha_r2))
        assert packfmt.pack(back) == data


def test_format_errors(rng):
    data = packfmt.pack(random_layer(rng, 8, 5))
    cases = [
        (b"XQ61" + data[4:], 0),
        (data[:4] + struct.pack("<I", 2) + data[8:], 4),
        (data[:10], 10),
        (data + b"\x00", len(data)),
    ]
    for bad, offset in cases:
        with pytest.raises(FormatError) as info:
            packfmt.parse(bad)
        assert info.value.offset == offset
    # corrupt the first section length
    bad = bytearray(data)
    struct.pack_into("<Q", bad, 24 + 12, 99)
    with pytest.raises(FormatError) as info:
        packfmt.parse(bytes(bad))
    assert info.value.offset == 36
    # mask popcount disagreeing with k
    bad = bytearray(data)
    bad[164] ^= 0xFF
    with pytest.raises(FormatError):
        packfmt.parse(bytes(bad))


def test_fp16_overflow_rejected(rng):
    q = random_layer(rng, 4, 4)
    s = q.scaling
    big = q.with_scaling(ScalingVectors(s.alpha_s, s.alpha_r1, np.full(4, 1e6)))
    with pytest.raises(FormatError):
        packfmt.pack(big)


def dense_reference(X, q):
    return X @ dequantize(packfmt.unpack(packfmt.pack(q)))


def test_packed_forward_single_weight():
    q = quantize_layer(np.array([[2.0]]), ChannelMask.from_bits([0]))
    out = packfmt.packed_forward(np.array([[3.0]]), packfmt.pack(q))
    assert out.tolist() == [[6.0]]


def test_packed_forward_all_binary_identity_scales(rng):
    signs = rng.choice([-1.0, 1.0], size=(12, 9))
    q = quantize_layer(signs, ChannelMask.from_bits(np.zeros(12)))
    X = rng.normal(size=(4, 12))
    assert np.allclose(packfmt.packed_forward(X, packfmt.pack(q)), X @ signs, atol=1e-12)


def test_packed_forward_matches_dense(rng):
    q = random_layer(rng, 64, 32)
    X = rng.normal(size=(16, 64))
    ref = dense_reference(X, q)
    got = packfmt.packed_forward(X, packfmt.pack(q))
    assert np.abs(got - ref).max() / np.abs(ref).max() <= 1e-3
    with pytest.raises(ShapeError):
        packfmt.packed_forward(np.ones((2, 63)), packfmt.pack(q))


def test_compiled_and_fallback_kernels_agree(rng):
    if kernels.compiled is None:
        pytest.skip("compiled extension not built")
    for n in (1, 7, 8, 33):
        plane = rng.integers(0, 256, size=(6, (n + 7) // 8), dtype=np.uint8)
        nib = rng.integers(0, 256, size=(6, (n + 1) // 2), dtype=np.uint8)
        assert np.array_equal(kernels.compiled.decode_signs(plane, n), _kernels_py.decode_signs(plane, n))
        assert np.array_equal(kernels.compiled.decode_nibbles(nib, n), _kernels_py.decode_nibbles(nib, n))
        u = rng.normal(size=(5, 6))
        assert np.array_equal(kernels.compiled.sign_matmul(u, plane, n), _kernels_py.sign_matmul(u, plane, n))
    empty = np.zeros((0, 1), dtype=np.uint8)
    assert kernels.compiled.decode_signs(empty, 8).shape == (0, 8)


def test_fallback_kernels_match_unpacked(rng):
    u = rng.normal(size=(3, 4))
    signs = rng.random((4, 11)) < 0.5
    codes = rng.integers(0, 16, size=(4, 11))
    pm = np.where(signs, 1.0, -1.0)
    assert np.allclose(_kernels_py.sign_matmul(u, packfmt.pack_signs(signs), 11), u @ pm)
    assert np.allclose(_kernels_py.nibble_matmul(u, packfmt.pack_nibbles(codes), 11), u @ codes)


def test_describe_and_digests(rng):
    data = packfmt.pack(random_layer(rng, 16, 8))
    info = packfmt.describe(data)
    assert info["k"] == 4 and info["bytes"] == len(data)
    assert set(info["digests"]) == set(packfmt.SECTIONS)
    assert packfmt.section_digests(packfmt.pack(packfmt.unpack(data))) == info["digests"]


def test_bit_accounting_presets():
    assert abs(packfmt.PRESETS["saltbin"]() - 1.61) <= 0.005
    assert packfmt.PRESETS["pb-llm"]() == 2.7
    assert packfmt.PRESETS["billm"]() == 2.1


def test_bit_accounting_components():
    acc = packfmt.bit_accounting(4096, 4096, 0.2)
    assert acc.weight_bits == pytest.approx(1.6, abs=1e-15)
    assert acc.index_bits == pytest.approx(1 / (4096 * 1.6), rel=1e-12)
    assert acc.additional_bits == pytest.approx((3 * 16 + 0.2 * 16) / (4096 * 1.6), rel=1e-12)
    totals = [packfmt.bit_accounting(256, 256, p).total for p in (0.05, 0.1, 0.2, 0.4, 0.8)]
    assert all(a < b for a, b in zip(totals, totals[1:]))
    with pytest.raises(ConfigError):
        packfmt.bit_accounting(8, 8, 0.0)


def test_pure_python_backend_forced_by_env():
    import os
    import subprocess
    import sys
    code = ("import numpy as np; from saltbin import kernels, packfmt, quant, saliency;"
            "r = np.random.default_rng(0); W = r.normal(size=(20, 9));"
            "q = quant.quantize_layer(W, saliency.build_mask(r.random(20), 0.3));"
            "X = r.normal(size=(4, 20));"
            "d = packfmt.pack(q);"
            "print(kernels.BACKEND, np.abs(packfmt.packed_forward(X, d) - X @ quant.dequantize(packfmt.unpack(d))).max())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={**os.environ, "SALTBIN_PURE_PYTHON": "1"}).stdout.split()
    assert out[0] == "numpy"
    assert float(out[1]) < 1e-12
