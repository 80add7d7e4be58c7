import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from saltbin.errors import ConfigError, DegenerateInputError, ShapeError
from saltbin.saliency import (ChannelMask, build_mask, channel_saliency, layer_error_and_bound,
                              salient_count, weight_saliency_map)


def test_channel_saliency_examples(rng):
    assert channel_saliency([[1, 10], [-1, 12]]).scores.tolist() == [1.0, 11.0]
    assert channel_saliency(np.zeros((3, 4))).scores.tolist() == [0.0] * 4
    X = rng.normal(size=(64, 16))
    oracle = [sum(abs(X[a, i]) for a in range(64)) / 64 for i in range(16)]
    np.testing.assert_allclose(channel_saliency(X).scores, oracle, atol=1e-9)


def test_channel_saliency_kinds_and_pooling(rng):
    X = rng.normal(size=(10, 3))
    assert np.allclose(channel_saliency(X, "max-abs").scores, np.abs(X).max(0))
    assert np.allclose(channel_saliency(X, "l2").scores, np.sqrt((X ** 2).sum(0)))
    pooled = channel_saliency([X[:4], X[4:]]).scores
    assert np.allclose(pooled, channel_saliency(X).scores)
    with pytest.raises(ConfigError):
        channel_saliency(X, "median")
    with pytest.raises(DegenerateInputError):
        channel_saliency(np.zeros((0, 3)))
    with pytest.raises(DegenerateInputError):
        channel_saliency([])


def test_build_mask_examples():
    assert build_mask(np.array([1.0, 11.0]), 0.5).bits.tolist() == [False, True]
    assert build_mask(np.array([5.0] * 4), 0.5).bits.tolist() == [True, True, False, False]


def test_build_mask_matches_full_sort(rng):
    s = rng.normal(size=100) ** 2
    mask = build_mask(s, 0.2)
    assert mask.k == 20
    ranked = sorted(range(100), key=lambda i: (-s[i], i))[:20]
    assert set(np.flatnonzero(mask.bits)) == set(ranked)


@pytest.mark.parametrize("m, p, k", [(10, 0.2, 2), (10, 0.05, 1), (10, 0.99, 9), (5, 0.5, 3), (2, 0.5, 1)])
def test_salient_count_rounds_and_clamps(m, p, k):
    assert salient_count(m, p) == k


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_build_mask_rejects_ratio(p):
    with pytest.raises(ConfigError):
        build_mask(np.ones(4), p)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1e6)),
       st.floats(0.01, 0.99), st.floats(1e-3, 1e3))
def test_mask_scale_invariance_and_popcount(s, p, c):
    a = build_mask(s, p)
    assert a.k == salient_count(s.size, p)
    scaled = s * c
    if np.array_equal(np.argsort(-scaled, kind="stable"), np.argsort(-s, kind="stable")):
        assert np.array_equal(build_mask(scaled, p).bits, a.bits)
    assert np.array_equal(build_mask(s, p).bits, a.bits)


def test_mask_selection_invariant_under_exact_scaling(rng):
    s = rng.random(50)
    for c in (2.0, 0.5, 8.0, 1024.0):
        assert np.array_equal(build_mask(c * s, 0.2).bits, build_mask(s, 0.2).bits)


@pytest.mark.parametrize("seed", range(10))
def test_dominant_channel_always_selected(seed):
    r = np.random.default_rng(seed)
    m = 16
    X = r.normal(size=(32, m))
    hot = int(r.integers(m))
    X[:, hot] *= 1000.0
    for p in (1 / m, 0.2, 0.5):
        assert build_mask(channel_saliency(X), p).bits[hot]


def test_weight_saliency_map_examples(rng):
    assert weight_saliency_map([[1, 0], [0, 2]], 0.25).tolist() == [[False, False], [False, True]]
    flat = weight_saliency_map(np.ones((3, 4)), 0.3).ravel()
    assert flat.sum() == math.ceil(0.3 * 12) and flat[:4].all() and not flat[4:].any()
    W = rng.normal(size=(32, 32))
    mp = weight_saliency_map(W, 0.1)
    count = math.ceil(0.1 * 1024)
    top = sorted(range(1024), key=lambda i: (-abs(W.flat[i]), i))[:count]
    assert set(np.flatnonzero(mp.ravel())) == set(top)


def test_layer_error_examples():
    e, b = layer_error_and_bound([[2.0]], [[1.0]], [[0.5]])
    assert e.tolist() == [[1.0]] and b.tolist() == [[1.0]]
    e, b = layer_error_and_bound([[1.0, 1.0]], [[0.0], [0.0]], [[0.5], [-0.5]])
    assert e.tolist() == [[0.0]] and b.tolist() == [[1.0]]
    with pytest.raises(ShapeError):
        layer_error_and_bound(np.ones((1, 2)), np.ones((2, 2)), np.ones((2, 3)))


def test_layer_bound_matches_direct_sum(rng):
    X, W, Wq = rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    e, b = layer_error_and_bound(X, W, Wq)
    for a in range(4):
        for j in range(3):
            assert b[a, j] == pytest.approx(sum(abs(X[a, i]) * abs(Wq[i, j] - W[i, j]) for i in range(6)))
            assert e[a, j] == pytest.approx(abs(sum(X[a, i] * (Wq[i, j] - W[i, j]) for i in range(6))))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bound_dominates_error(seed):
    r = np.random.default_rng(seed)
    t, m, n = r.integers(1, 8, size=3)
    X = r.normal(size=(t, m)) * r.choice([1e-3, 1.0, 1e3], size=m)
    W = r.normal(size=(m, n))
    e, b = layer_error_and_bound(X, W, W + r.normal(size=(m, n)))
    assert np.all(e <= b + 1e-9)


def test_channel_mask_from_bits():
    mk = ChannelMask.from_bits([1, 0, 0, 1])
    assert mk.k == 2 and mk.m == 4 and mk.ratio == 0.5
    with pytest.raises(ShapeError):
        ChannelMask(np.zeros((2, 2)), 0.5)
