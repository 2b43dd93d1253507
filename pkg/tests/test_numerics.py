"""Vector/matrix primitives: transfers, their derivatives, seeded init."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcap.errors import NumericError
from tcap.numerics import (Transfer, affine, gaussian_init, hadamard,
                           log_softmax, sigmoid, softmax, transfer_apply,
                           transfer_backward)

finite_vectors = st.lists(
    st.floats(min_value=-30.0, max_value=30.0, allow_nan=False),
    min_size=1, max_size=12).map(np.array)


def test_sigmoid_known_value():
    # sigmoid(1) = 1/(1+e^-1), evaluated independently via math.exp
    expected = 1.0 / (1.0 + math.exp(-1.0))
    assert transfer_apply(Transfer.SIGMOID, np.array([1.0]))[0] == pytest.approx(
        expected, abs=1e-15)
    assert expected == pytest.approx(0.7310585786300049, abs=1e-15)


def test_sigmoid_extremes_do_not_overflow():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out[0] == 0.0
    assert out[1] == 0.5
    assert out[2] == 1.0


def test_identity_returns_copy():
    v = np.array([1.0, -2.0])
    out = transfer_apply(Transfer.IDENTITY, v)
    assert np.array_equal(out, v)
    out[0] = 99.0
    assert v[0] == 1.0


def test_relu_clamps_negatives():
    out = transfer_apply(Transfer.RELU, np.array([-3.0, 0.0, 2.5]))
    assert np.array_equal(out, [0.0, 0.0, 2.5])


def test_softmax_uniform_on_equal_inputs():
    out = transfer_apply(Transfer.SOFTMAX, np.array([5.0, 5.0, 5.0, 5.0]))
    assert np.allclose(out, 0.25, atol=1e-15)


def test_softmax_shift_invariance_and_stability():
    v = np.array([1.0, 2.0, 3.0])
    big = v + 1e4
    assert np.allclose(softmax(v), softmax(big), atol=1e-12)
    assert np.all(np.isfinite(softmax(np.array([1e4, 0.0]))))


@given(finite_vectors)
@settings(max_examples=60)
def test_softmax_is_a_distribution(v):
    p = softmax(v)
    assert np.all(p >= 0.0)
    assert abs(float(np.sum(p)) - 1.0) < 1e-12


@given(finite_vectors)
@settings(max_examples=60)
def test_log_softmax_matches_log_of_softmax(v):
    assert np.allclose(log_softmax(v), np.log(softmax(v)), atol=1e-9)


def test_transfer_apply_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        transfer_apply(Transfer.TANH, np.array([]))
    with pytest.raises(NumericError):
        transfer_apply(Transfer.TANH, np.array([np.nan]))


def test_transfer_parse():
    assert Transfer.parse("Tanh") is Transfer.TANH
    with pytest.raises(ValueError):
        Transfer.parse("swish")


@pytest.mark.parametrize("kind", list(Transfer))
def test_transfer_backward_matches_finite_differences(kind):
    rng = np.random.Generator(np.random.PCG64(5))
    u = rng.normal(size=8) * 2.0
    u[np.abs(u) < 1e-3] += 0.5  # keep relu away from its kink
    dg = rng.normal(size=8)
    g = transfer_apply(kind, u)
    du = transfer_backward(kind, u, g, dg)
    eps = 1e-6
    for i in range(u.shape[0]):
        bumped = u.copy()
        bumped[i] += eps
        plus = float(np.dot(transfer_apply(kind, bumped), dg))
        bumped[i] -= 2 * eps
        minus = float(np.dot(transfer_apply(kind, bumped), dg))
        numeric = (plus - minus) / (2 * eps)
        assert du[i] == pytest.approx(numeric, abs=1e-6)


def test_affine_matches_loop_oracle():
    rng = np.random.Generator(np.random.PCG64(2))
    W = rng.normal(size=(4, 3))
    x = rng.normal(size=3)
    b = rng.normal(size=4)
    got = affine(W, x, b)
    for i in range(4):
        want = b[i] + sum(W[i][j] * x[j] for j in range(3))
        assert got[i] == pytest.approx(want, abs=1e-12)


def test_affine_shape_errors():
    with pytest.raises(ValueError):
        affine(np.zeros((2, 3)), np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        affine(np.zeros((2, 3)), np.zeros(3), np.zeros(5))


def test_hadamard_matches_elementwise_products():
    a = np.array([1.0, -2.0, 0.5])
    b = np.array([4.0, 3.0, -2.0])
    assert np.array_equal(hadamard(a, b), [4.0, -6.0, -1.0])
    with pytest.raises(ValueError):
        hadamard(a, np.zeros(2))


def test_gaussian_init_deterministic_and_shaped():
    a = gaussian_init(3, 4, 0.0, 0.1, seed=9)
    b = gaussian_init(3, 4, 0.0, 0.1, seed=9)
    c = gaussian_init(3, 4, 0.0, 0.1, seed=10)
    assert a.shape == (3, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gaussian_init_zero_std_is_exact_constant():
    a = gaussian_init(2, 5, 1.0, 0.0, seed=0)
    assert np.array_equal(a, np.ones((2, 5)))


def test_gaussian_init_moments():
    a = gaussian_init(200, 200, 2.0, 0.5, seed=1)
    assert abs(float(a.mean()) - 2.0) < 0.01
    assert abs(float(a.std()) - 0.5) < 0.01
