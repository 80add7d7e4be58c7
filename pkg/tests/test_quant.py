import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saltbin.errors import ConfigError, DataError, IntegrityError, ShapeError
from saltbin.quant import (AffineRowParams, ScalingVectors, affine_dequantize_row, affine_quantize_row,
                           binarize_row, dequantize, quantize_layer)
from saltbin.saliency import ChannelMask, build_mask, channel_saliency, layer_error_and_bound
from saltbin.synth import channel_scales


def grid_search_alpha(w, step=1e-4):
    grid = np.arange(0.0, 2 * np.abs(w).max() + step, step)
    s = np.where(w >= 0, 1.0, -1.0)
    # ||w - a s||^2 = sum w^2 - 2 a sum|w| + a^2 n
    cost = (w ** 2).sum() - 2 * grid * np.abs(w).sum() + grid ** 2 * w.size
    return grid[np.argmin(cost)]


def test_affine_endpoints():
    codes, p = affine_quantize_row([0.0, 1.5], 4)
    assert p.scale == pytest.approx(0.1) and p.zero == 0
    assert codes.tolist() == [0, 15]
    np.testing.assert_allclose(affine_dequantize_row(codes, p), [0.0, 1.5], atol=1e-12)


def test_affine_constant_row():
    codes, p = affine_quantize_row([3.0, 3.0, 3.0], 4)
    assert p.scale == 1.0 and p.zero == 0
    assert len(set(codes.tolist())) == 1
    assert np.all(np.abs(affine_dequantize_row(codes, p) - 3.0) <= p.scale / 2)


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
def test_affine_roundtrip_bound(rng, bits):
    for _ in range(50):
        w = rng.normal(size=64)
        codes, p = affine_quantize_row(w, bits)
        assert codes.max() <= 2 ** bits - 1
        raw = np.round(w / p.scale) + p.zero
        unclamped = (raw >= 0) & (raw <= 2 ** bits - 1)
        err = np.abs(affine_dequantize_row(codes, p) - w)
        assert np.all(err[unclamped] <= p.scale / 2 + 1e-9)


def test_affine_errors():
    with pytest.raises(DataError):
        affine_quantize_row([1.0, np.inf])
    with pytest.raises(ConfigError):
        affine_quantize_row([1.0, 2.0], 5)


def test_binarize_examples():
    bits, a = binarize_row([0.5, -1.5, 1.0, -1.0])
    assert bits.tolist() == [True, False, True, False] and a == 1.0
    bits, a = binarize_row(np.zeros(5))
    assert bits.all() and a == 0.0


def test_analytic_alpha_matches_grid_search(rng):
    for _ in range(100):
        w = rng.normal(size=int(rng.integers(4, 257)))
        _, a = binarize_row(w)
        assert abs(a - grid_search_alpha(w)) <= 1e-3


def _layer(rng, m=16, n=8, ratio=0.25):
    W = rng.normal(size=(m, n))
    mask = build_mask(rng.random(m), ratio)
    return W, quantize_layer(W, mask)


def test_quantize_layer_routes_rows():
    W = np.array([[0.0, 1.5], [-2.0, 1.0]])
    q = quantize_layer(W, ChannelMask.from_bits([1, 0]))
    assert q.codes.tolist() == [[0, 15]]
    assert q.signs.tolist() == [[False, True]]
    assert q.scaling.alpha_s.tolist() == [0.0, 1.5]
    Wq = dequantize(q)
    np.testing.assert_allclose(Wq, [[0.0, 1.5], [-1.5, 1.5]], atol=1e-12)


def test_all_salient_layer_still_dequantizes(rng):
    W = rng.normal(size=(3, 4))
    q = quantize_layer(W, ChannelMask.from_bits([1, 1, 1]))
    assert q.signs.shape == (0, 4)
    assert dequantize(q).shape == (3, 4)
    q0 = quantize_layer(W, ChannelMask.from_bits([0, 0, 0]))
    assert q0.codes.shape == (0, 4)


def test_quantize_layer_branches_oracle(rng):
    W, q = _layer(rng)
    Wq = dequantize(q)
    sal = q.salient_rows
    for r, i in enumerate(sal):
        assert np.all(np.abs(Wq[i] - W[i]) <= q.scales[r] / 2 + 1e-9)
    for i in q.binary_rows:
        np.testing.assert_array_equal(Wq[i], np.abs(W[i]).mean() * np.where(W[i] >= 0, 1.0, -1.0))


def test_dequantize_reduces_to_sign_at_identity(rng):
    W, q = _layer(rng)
    Wq = dequantize(q)
    rest = q.binary_rows
    expected = q.scaling.alpha_s[rest, None] * np.where(W[rest] >= 0, 1.0, -1.0)
    assert np.array_equal(Wq[rest], expected)


def test_dequantize_linear_in_column_scale(rng):
    W, q = _layer(rng)
    base = dequantize(q)
    s = q.scaling
    doubled = dequantize(q.with_scaling(ScalingVectors(s.alpha_s, s.alpha_r1, 2 * s.alpha_r2)))
    rest = q.binary_rows
    np.testing.assert_array_equal(doubled[rest], 2 * base[rest])
    np.testing.assert_array_equal(doubled[q.salient_rows], base[q.salient_rows])


def test_dequantize_elementwise_oracle(rng):
    W, q = _layer(rng, 12, 7)
    s = q.scaling
    q = q.with_scaling(ScalingVectors(s.alpha_s * rng.uniform(0.5, 2, 12), rng.uniform(0.5, 2, 12),
                                      rng.uniform(0.5, 2, 7)))
    Wq = dequantize(q)
    sal = list(q.salient_rows)
    rest = list(q.binary_rows)
    for i in range(12):
        for j in range(7):
            if i in sal:
                r = sal.index(i)
                ref = (int(q.codes[r, j]) - q.zeros[r]) * q.scales[r]
            else:
                r = rest.index(i)
                sign = 1.0 if q.signs[r, j] else -1.0
                ref = q.scaling.alpha_s[i] * q.scaling.alpha_r1[i] * q.scaling.alpha_r2[j] * sign
            assert Wq[i, j] == pytest.approx(ref, rel=1e-14, abs=1e-15)


def test_dequantize_integrity(rng):
    W, q = _layer(rng)
    bad = q.with_scaling(ScalingVectors(q.scaling.alpha_s, q.scaling.alpha_r1, np.ones(3)))
    with pytest.raises(IntegrityError):
        dequantize(bad)
    with pytest.raises(ShapeError):
        quantize_layer(W, ChannelMask.from_bits([1, 0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dequantize_deterministic_and_finite(seed):
    r = np.random.default_rng(seed)
    W, q = _layer(r, int(r.integers(2, 20)), int(r.integers(1, 20)))
    a, b = dequantize(q), dequantize(q)
    assert np.array_equal(a, b) and np.all(np.isfinite(a)) and a.shape == W.shape


def salient_vs_binary_error(seed, ratio):
    r = np.random.default_rng(seed)
    m, n = 64, 32
    X = r.normal(size=(128, m)) * channel_scales(m, r)
    W = r.normal(0, 1 / np.sqrt(m), size=(m, n))
    mask = build_mask(channel_saliency(X), ratio) if ratio else ChannelMask.from_bits(np.zeros(m))
    return layer_error_and_bound(X, W, dequantize(quantize_layer(W, mask)))[0].mean()


@pytest.mark.parametrize("seed", range(5))
def test_salient_rows_reduce_layer_error(seed):
    assert salient_vs_binary_error(seed, 0.2) <= salient_vs_binary_error(seed, None)
