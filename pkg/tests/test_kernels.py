import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dance.errors import DimensionError, ValidationError
from dance.kernels import (
    KernelParams,
    kernel_eval,
    kernel_matrix,
    mahalanobis_distance,
    psd_sqrt,
    solve_regularized,
)


def random_psd(rng, d, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T


def test_mahalanobis_examples():
    assert mahalanobis_distance([0, 0], [3, 4], np.eye(2)) == pytest.approx(5.0)
    assert mahalanobis_distance([1.5, -2], [1.5, -2], np.eye(2)) == 0.0
    assert mahalanobis_distance([0, 0], [1, 1], np.diag([4.0, 1.0])) == pytest.approx(math.sqrt(5), rel=1e-15)


def test_mahalanobis_errors():
    with pytest.raises(DimensionError):
        mahalanobis_distance([0, 0], [1, 1, 1], np.eye(2))
    with pytest.raises(ValidationError):
        mahalanobis_distance([0, 0], [1, 0], np.diag([-1.0, 1.0]))


def test_mahalanobis_clamps_tiny_negative():
    m = np.diag([-1e-13, 1.0])
    assert mahalanobis_distance([0, 0], [1, 0], m) == 0.0


def test_kernel_eval_examples():
    p = KernelParams.identity(2, bandwidth=1.0, shape=1.0)
    assert kernel_eval([2, 2], [2, 2], p) == 1.0
    assert kernel_eval([0, 0], [3, 4], p) == pytest.approx(math.exp(-5.0), rel=1e-14)
    p2 = KernelParams.identity(2, bandwidth=1.0, shape=2.0)
    assert kernel_eval([0, 0], [0, 16], p2) == pytest.approx(math.exp(-4.0), rel=1e-14)


def test_kernel_params_validation():
    with pytest.raises(ValidationError):
        KernelParams(np.eye(2), 0.0, 1.0)
    with pytest.raises(ValidationError):
        KernelParams(np.eye(2), 1.0, -1.0)
    with pytest.raises(ValidationError):
        KernelParams(np.array([[1.0, 2.0], [0.0, 1.0]]), 1.0, 1.0)


def test_kernel_matrix_single_point():
    p = KernelParams.identity(3)
    np.testing.assert_array_equal(kernel_matrix([[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]], p), [[1.0]])


def test_kernel_matrix_matches_pointwise():
    rng = np.random.default_rng(0)
    p = KernelParams(random_psd(rng, 4), 1.7, 0.8)
    a, b = rng.standard_normal((2, 4)), rng.standard_normal((3, 4))
    k = kernel_matrix(a, b, p)
    expected = np.array([[kernel_eval(x, y, p) for y in b] for x in a])
    np.testing.assert_allclose(k, expected, rtol=1e-12)


def test_kernel_matrix_self_symmetric_unit_diagonal():
    rng = np.random.default_rng(1)
    p = KernelParams(random_psd(rng, 5), 2.0, 1.3)
    a = rng.standard_normal((30, 5))
    k = kernel_matrix(a, a, p)
    np.testing.assert_array_equal(k, k.T)
    np.testing.assert_array_equal(np.diag(k), np.ones(30))


def test_kernel_matrix_dimension_mismatch():
    with pytest.raises(DimensionError):
        kernel_matrix(np.zeros((2, 3)), np.zeros((2, 4)), KernelParams.identity(3))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (2, 3), elements=st.floats(-10, 10)),
    st.floats(0.1, 10),
    st.floats(0.5, 2),
)
def test_kernel_symmetric_and_bounded(pts, bandwidth, shape):
    p = KernelParams(np.diag([1.0, 2.0, 0.5]), bandwidth, shape)
    k12, k21 = kernel_eval(pts[0], pts[1], p), kernel_eval(pts[1], pts[0], p)
    assert k12 == k21
    assert 0.0 <= k12 <= 1.0
    if mahalanobis_distance(pts[0], pts[1], p.feature_matrix) == 0.0:
        assert k12 == 1.0


def test_psd_sqrt_examples():
    np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    # eigenvalues 1 and 3 with eigenvectors (1, 1)/sqrt2 and (1, -1)/sqrt2
    big, small = (math.sqrt(3) + 1) / 2, (math.sqrt(3) - 1) / 2
    np.testing.assert_allclose(psd_sqrt([[2.0, 1.0], [1.0, 2.0]]), [[big, small], [small, big]], rtol=1e-14)


def test_psd_sqrt_rejects_asymmetric_and_indefinite():
    with pytest.raises(ValidationError):
        psd_sqrt([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        psd_sqrt(np.diag([1.0, -0.5]))


def test_psd_sqrt_clamps_rounding_negatives():
    m = np.diag([1.0, -1e-10])
    root = psd_sqrt(m)
    np.testing.assert_allclose(root, np.diag([1.0, 0.0]), atol=1e-15)


@pytest.mark.parametrize("d", [1, 2, 7, 20, 50])
def test_psd_sqrt_squares_back(d):
    rng = np.random.default_rng(d)
    for rank in {d, max(1, d // 2)}:
        m = random_psd(rng, d, rank)
        s = psd_sqrt(m)
        np.testing.assert_allclose(s, s.T, atol=0)
        err = np.linalg.norm(s @ s - m) / np.linalg.norm(m)
        assert err < 1e-8


def test_mahalanobis_matches_projected_euclidean():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = random_psd(rng, 6, 4)
        z1, z2 = rng.standard_normal((2, 6))
        s = psd_sqrt(m)
        proj = np.linalg.norm(z1 @ s - z2 @ s)
        assert mahalanobis_distance(z1, z2, m) == pytest.approx(proj, rel=1e-8)


def test_solve_examples():
    y = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_allclose(solve_regularized(np.eye(2), y, 0.0), y)
    np.testing.assert_allclose(solve_regularized([[1.0]], [[2.0]], 1.0), [[1.0]])
    beta = solve_regularized([[1.0, 0.5], [0.5, 1.0]], [[1.0], [1.0]], 0.5)
    np.testing.assert_allclose(beta, [[0.5], [0.5]], rtol=1e-14)


def test_solve_errors():
    with pytest.raises(DimensionError):
        solve_regularized(np.eye(3), np.ones((2, 1)), 0.1)
    with pytest.raises(ValidationError):
        solve_regularized(np.eye(2), np.ones((2, 1)), -1.0)
    with pytest.raises(ValidationError):
        solve_regularized([[1.0, 1.0], [0.0, 1.0]], np.ones((2, 1)), 0.0)


def test_solve_jitter_rescues_singular_psd():
    # rank one: Cholesky fails at ridge 0 but succeeds once jitter is added
    k = np.ones((3, 3))
    beta = solve_regularized(k, np.ones((3, 1)), 0.0)
    assert np.all(np.isfinite(beta))


@pytest.mark.parametrize("n", [5, 50, 200])
def test_solve_residual_well_conditioned(n):
    rng = np.random.default_rng(n)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.logspace(0, 6, n)
    k = (q * eig) @ q.T
    k = 0.5 * (k + k.T)
    y = rng.standard_normal((n, 3))
    beta = solve_regularized(k, y, 0.0)
    assert np.linalg.norm(k @ beta - y) <= 1e-8 * np.linalg.norm(y)
