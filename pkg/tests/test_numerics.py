import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from regiontok.numerics import (
    DegenerateVectorError,
    InvalidInputError,
    RffParams,
    cosine_matrix,
    cosine_sim,
    gelu,
    layer_norm,
    rff_embed,
    rff_embed_many,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)
    np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3])
    big = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_empty_rejected():
    with pytest.raises(InvalidInputError):
        softmax([])


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_shift_invariant(v, c):
    np.testing.assert_allclose(softmax(v + c), softmax(v), atol=1e-6)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_is_distribution(v):
    p = softmax(v)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_cosine_examples():
    assert cosine_sim([1, 0], [0, 1]) == 0
    assert cosine_sim([2, 0], [5, 0]) == 1
    assert cosine_sim([1, 1], [1, -1]) == 0


def test_cosine_errors():
    with pytest.raises(DegenerateVectorError):
        cosine_sim([0, 0], [1, 0])
    with pytest.raises(InvalidInputError):
        cosine_sim([1, 0, 0], [1, 0])
    with pytest.raises(DegenerateVectorError):
        cosine_matrix([[0, 0]], [[1, 0]])


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(a, s):
    if np.linalg.norm(a) < 1e-3:
        return
    assert cosine_sim(a, s * a) == pytest.approx(1.0, abs=1e-12)


def test_cosine_matrix_matches_scalar():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    m = cosine_matrix(a, b)
    for i in range(4):
        for j in range(3):
            assert m[i, j] == pytest.approx(cosine_sim(a[i], b[j]))


def test_layer_norm_and_gelu():
    np.testing.assert_allclose(layer_norm([1.0, 1.0, 1.0], np.ones(3), np.zeros(3)), 0.0)
    assert gelu(0.0) == 0.0
    # independent oracle: x * Phi(x) via the normal cdf
    assert gelu(3.0) == pytest.approx(3 * norm.cdf(3.0), rel=1e-12)
    assert gelu(3.0) == pytest.approx(2.9960, abs=5e-5)


def test_layer_norm_statistics():
    v = np.random.default_rng(0).normal(size=16) * 4 + 2
    out = layer_norm(v)
    assert out.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.var() == pytest.approx(1.0, rel=1e-4)


def test_rff_zero_frequencies():
    p = RffParams(np.zeros((4, 2)))
    np.testing.assert_array_equal(rff_embed(0.3, 0.9, p), [0, 0, 0, 0, 1, 1, 1, 1])


def test_rff_determinism_and_asymmetry():
    p1, p2 = RffParams.create(32, seed=0), RffParams.create(32, seed=0)
    np.testing.assert_array_equal(rff_embed(0.2, 0.7, p1), rff_embed(0.2, 0.7, p2))
    assert not np.allclose(rff_embed(0.2, 0.7, p1), rff_embed(0.7, 0.2, p1))
    assert p1.dim == 32 and p1.frequencies.shape == (16, 2)


def test_rff_odd_dim_rejected():
    with pytest.raises(InvalidInputError):
        RffParams.create(7)


def test_rff_clamps_out_of_range(caplog):
    p = RffParams.create(8, seed=1)
    with caplog.at_level("WARNING"):
        out = rff_embed(1.5, -0.2, p)
    np.testing.assert_array_equal(out, rff_embed(1.0, 0.0, p))
    assert "clamping" in caplog.text


@settings(max_examples=60)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(-0.01, 0.01), st.floats(-0.01, 0.01))
def test_rff_lipschitz(x, y, dx, dy):
    p = RffParams.create(16, seed=2)
    x2, y2 = min(max(x + dx, 0), 1), min(max(y + dy, 0), 1)
    delta = max(abs(x2 - x), abs(y2 - y))
    bound = 2 * math.pi * np.linalg.norm(p.frequencies) * delta * math.sqrt(2)
    change = np.linalg.norm(rff_embed(x, y, p) - rff_embed(x2, y2, p))
    assert change <= bound + 1e-12


def test_rff_many_matches_single():
    p = RffParams.create(8, seed=4)
    coords = [[0.1, 0.2], [0.9, 0.4]]
    many = rff_embed_many(coords, p)
    for c, row in zip(coords, many):
        np.testing.assert_allclose(row, rff_embed(*c, p), atol=1e-12)
    # purity: identical calls are bit-identical
    np.testing.assert_array_equal(many, rff_embed_many(coords, p))
