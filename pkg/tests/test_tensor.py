import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import direct_softmax, gauss_jordan_inverse, gelu_erf, loop_matmul, two_pass_layernorm
from pmetlab.tensor import (
    NotPositiveDefiniteError,
    ShapeError,
    as_tensor,
    cosine,
    gelu,
    gelu_grad,
    layernorm,
    log_softmax,
    matmul,
    softmax,
    solve_spd,
)

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, k, m = rng.integers(1, 7, size=3)
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        np.testing.assert_allclose(matmul(a, b), loop_matmul(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_as_tensor_rejects_nan():
    with pytest.raises(ValueError):
        as_tensor([1.0, float("nan")])
    assert as_tensor([1, 2]).dtype == np.float64


def test_solve_spd_matches_gauss_jordan():
    rng = np.random.default_rng(1)
    for _ in range(10):
        d = int(rng.integers(2, 9))
        B = rng.normal(size=(d, d))
        A = B @ B.T + d * np.eye(d)
        rhs = rng.normal(size=(d, 3))
        inv = np.array(gauss_jordan_inverse(A.tolist()))
        np.testing.assert_allclose(solve_spd(A, rhs), inv @ rhs, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(solve_spd(A, rhs[:, 0]), inv @ rhs[:, 0], rtol=1e-10, atol=1e-12)


def test_solve_spd_rejects_indefinite_and_asymmetric():
    with pytest.raises(NotPositiveDefiniteError):
        solve_spd(np.diag([1.0, -1.0]), np.ones(2))
    with pytest.raises(NotPositiveDefiniteError):
        solve_spd(np.zeros((3, 3)), np.ones(3))
    with pytest.raises(ValueError):
        solve_spd(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones(2))
    with pytest.raises(ShapeError):
        solve_spd(np.eye(3), np.ones(2))


def test_softmax_matches_direct():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.normal(scale=5, size=int(rng.integers(1, 12)))
        np.testing.assert_allclose(softmax(x), direct_softmax(x.tolist()), rtol=1e-12)


def test_softmax_large_inputs_stay_finite():
    p = softmax(np.array([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0])
    assert np.all(np.isfinite(log_softmax(np.array([1e4, 0.0]))))


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_softmax_is_a_distribution(x):
    p = softmax(x)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(np.exp(log_softmax(x)), p, rtol=1e-10, atol=1e-300)


@given(arrays(np.float64, st.integers(1, 20), elements=finite), finite)
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(softmax(x + c), softmax(x), rtol=1e-9, atol=1e-15)


def test_layernorm_matches_two_pass():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = int(rng.integers(2, 10))
        x = rng.normal(scale=3, size=d)
        g = rng.normal(size=d)
        b = rng.normal(size=d)
        np.testing.assert_allclose(layernorm(x, g, b), two_pass_layernorm(x.tolist(), g, b), rtol=1e-10, atol=1e-12)


def test_layernorm_constant_row_and_width_one():
    out = layernorm(np.full(4, 7.0), np.ones(4), np.arange(4.0))
    np.testing.assert_allclose(out, np.arange(4.0))
    with pytest.raises(ShapeError):
        layernorm(np.ones(1), np.ones(1), np.zeros(1))


def test_gelu_close_to_erf_form():
    xs = np.linspace(-6, 6, 241)
    ref = np.array([gelu_erf(x) for x in xs])
    assert np.max(np.abs(gelu(xs) - ref)) < 1e-3
    assert gelu(np.array([0.0]))[0] == 0.0


def test_gelu_grad_matches_central_difference():
    xs = np.linspace(-5, 5, 101)
    h = 1e-6
    fd = (gelu(xs + h) - gelu(xs - h)) / (2 * h)
    np.testing.assert_allclose(gelu_grad(xs), fd, rtol=1e-6, atol=1e-8)


def test_gelu_odd_part_is_identity():
    # gelu(z) - gelu(-z) = z, which the probe tests rely on to build exact copies
    z = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(gelu(z) - gelu(-z), z, atol=1e-14)


def test_cosine():
    assert cosine(np.zeros(3), np.ones(3)) is None
    assert cosine(np.array([1.0, 0]), np.array([2.0, 0])) == 1.0
    assert math.isclose(cosine(np.array([1.0, 0]), np.array([0.0, 1])), 0.0)
