import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emoxnet.losses import (SmoothingConfig, categorical_cross_entropy, smooth_distribution,
                            soft_cross_entropy, softmax_cce_gradient, stable_softmax)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
logit_vectors = arrays(np.float64, 7, elements=finite)


def random_distribution(rng, n=7):
    d = rng.random(n) ** 3
    return d / d.sum()


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(stable_softmax(np.zeros(7)), np.full(7, 1 / 7), atol=1e-12)


def test_softmax_two_class_value():
    np.testing.assert_allclose(stable_softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_survives_large_logits():
    p = stable_softmax([1000.0, 0.0, -1000.0])
    assert np.isfinite(p).all() and p[0] == 1.0


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        stable_softmax([0.0, np.inf])
    with pytest.raises(ValueError):
        stable_softmax([0.0, np.nan])


@given(arrays(np.int64, 7, elements=st.integers(-40_000, 40_000)), st.integers(-10**6, 10**6))
def test_softmax_shift_invariance_exact(numerators, c):
    # dyadic logits and integer shifts add without rounding, so the
    # max-subtracted inputs and hence the outputs agree bit for bit
    z = numerators / 1024.0
    np.testing.assert_array_equal(stable_softmax(z), stable_softmax(z + c))


@given(logit_vectors, finite)
def test_softmax_shift_invariance_general(z, c):
    np.testing.assert_allclose(stable_softmax(z), stable_softmax(z + c), atol=1e-12)


@given(logit_vectors)
def test_softmax_argmax_and_sum(z):
    p = stable_softmax(z)
    assert abs(p.sum() - 1) < 1e-12
    assert np.argmax(p) == np.argmax(z) or p[np.argmax(p)] == p[np.argmax(z)]


def test_cce_known_values():
    y = np.eye(7)[3]
    assert categorical_cross_entropy(y, y) == 0.0
    assert categorical_cross_entropy(np.full(7, 1 / 7), y) == pytest.approx(math.log(7), abs=1e-12)
    assert categorical_cross_entropy(np.full(7, 1 / 7), np.full(7, 1 / 7)) == pytest.approx(math.log(7), abs=1e-12)


def test_cce_length_mismatch():
    with pytest.raises(ValueError):
        categorical_cross_entropy(np.full(7, 1 / 7), np.full(6, 1 / 6))


def test_cce_floor_keeps_zero_probability_finite():
    assert categorical_cross_entropy([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_cce_non_negative_and_zero_only_on_support(seed):
    rng = np.random.default_rng(seed)
    p, y = random_distribution(rng), random_distribution(rng)
    assert categorical_cross_entropy(p, y) >= 0
    k = rng.integers(7)
    assert categorical_cross_entropy(np.eye(7)[k], np.eye(7)[k]) == 0.0


def test_smoothing_one_hot_values():
    out = smooth_distribution(np.eye(7)[2], SmoothingConfig(0.1, 7))
    expected = np.full(7, 0.1 / 7)
    expected[2] = 0.9 + 0.1 / 7
    np.testing.assert_allclose(out, expected, atol=1e-15)
    assert out[2] == pytest.approx(0.9142857, abs=1e-7)
    assert out[0] == pytest.approx(0.0142857, abs=1e-7)


def test_smoothing_alpha_zero_is_identity(rng):
    d = random_distribution(rng)
    np.testing.assert_array_equal(smooth_distribution(d, SmoothingConfig(0.0)), d)


def test_smoothing_uniform_fixed_point():
    u = np.full(7, 1 / 7)
    np.testing.assert_allclose(smooth_distribution(u, SmoothingConfig(0.3)), u, atol=1e-15)


def test_smoothing_config_bounds():
    with pytest.raises(ValueError):
        SmoothingConfig(1.0)
    with pytest.raises(ValueError):
        SmoothingConfig(-0.1)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.85))
def test_smoothing_properties(seed, alpha):
    rng = np.random.default_rng(seed)
    cfg = SmoothingConfig(alpha)
    a, b = random_distribution(rng), random_distribution(rng)
    sa = smooth_distribution(a, cfg)
    assert abs(sa.sum() - 1) < 1e-12
    assert sa.min() >= alpha / 7 - 1e-15
    assert sa.max() <= 1 - alpha + alpha / 7 + 1e-15
    # affine in the input
    w = rng.random()
    np.testing.assert_allclose(smooth_distribution(w * a + (1 - w) * b, cfg),
                               w * sa + (1 - w) * smooth_distribution(b, cfg), atol=1e-12)
    assert np.argmax(sa) == np.argmax(a)


def test_gradient_known_values():
    np.testing.assert_allclose(softmax_cce_gradient([0.0, 0.0], [1.0, 0.0]), [-0.5, 0.5])
    z = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax_cce_gradient(z, stable_softmax(z)), 0.0, atol=1e-15)


def central_difference(f, z, h=1e-5):
    g = np.zeros_like(z)
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        z = rng.normal(0, 3, 7)
        y = random_distribution(rng)
        analytic = softmax_cce_gradient(z, y)
        numeric = central_difference(lambda v: categorical_cross_entropy(stable_softmax(v), y), z)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, rel.max())
    assert worst < 1e-4


def test_torch_loss_matches_numpy(rng):
    z = rng.normal(size=(5, 7))
    y = np.stack([random_distribution(rng) for _ in range(5)])
    expected = categorical_cross_entropy(stable_softmax(z), y).mean()
    got = soft_cross_entropy(torch.from_numpy(z), torch.from_numpy(y)).item()
    assert got == pytest.approx(expected, rel=1e-12)
