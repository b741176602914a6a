import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from koopvm.koopman import (
    EigenKoopman,
    StaticKoopman,
    StochasticEigenKoopman,
    build_koopman,
    propagate_deterministic,
    propagate_gaussian,
)
from koopvm.numcore import ShapeError, Tensor

E = np.e


def test_build_koopman_identity():
    assert np.array_equal(build_koopman(np.ones(4)), np.eye(4))


def test_build_koopman_hand_example():
    K = build_koopman([0.5, 0.0])
    assert np.array_equal(K, np.diag([0.5, 0.0]))
    assert np.array_equal(K @ [2.0, 7.0], [1.0, 0.0])


def test_build_koopman_rejects_non_finite():
    with pytest.raises(ValueError):
        build_koopman([1.0, np.inf])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_build_koopman_off_diagonal_zero(lam):
    K = build_koopman(lam)
    assert np.sum(np.abs(K - np.diag(np.diag(K)))) == 0.0


def test_propagate_identity_with_zero_local():
    h_prev = np.array([[0.3, -2.0]])
    out = propagate_deterministic(np.zeros((1, 2)), h_prev, matrix=np.eye(2))
    assert np.array_equal(out.data, h_prev)


def test_propagate_first_stage():
    h_hat = np.array([[1.0, 2.0]])
    assert np.array_equal(propagate_deterministic(h_hat).data, h_hat)
    assert np.array_equal(propagate_deterministic(h_hat, np.zeros((1, 2)), eigenvalues=[3.0, 4.0]).data, h_hat)


def test_propagate_hand_example():
    out = propagate_deterministic([[1.0, -0.5]], [[2.0, 1.0]], eigenvalues=[0.5, 2.0])
    assert out.data.tolist() == [[2.0, 1.5]]


def test_propagate_shape_mismatch():
    with pytest.raises(ShapeError):
        propagate_deterministic(np.zeros((1, 2)), np.zeros((1, 3)), eigenvalues=[1.0, 1.0])
    with pytest.raises(ShapeError):
        propagate_deterministic(np.zeros((1, 2)), np.zeros((1, 2)), matrix=np.eye(3))


def test_gaussian_zero_coupling():
    mu_hat, sigma_hat = np.array([[0.3, -1.0]]), np.array([[0.5, 2.0]])
    g = propagate_gaussian(mu_hat, sigma_hat, np.zeros(2), np.zeros(2), np.array([[5.0, 5.0]]), np.array([[3.0, 3.0]]))
    np.testing.assert_allclose(g.mu.data, mu_hat, rtol=0, atol=1e-12)
    np.testing.assert_allclose(g.sigma.data, sigma_hat, rtol=0, atol=1e-12)


def test_gaussian_hand_examples():
    g = propagate_gaussian([[1.0, -0.5]], [[1.0, E]], [0.5, 2.0], [1.0, 1.0], [[2.0, 1.0]], [[E, 1.0]])
    np.testing.assert_allclose(g.mu.data, [[2.0, 1.5]], rtol=0, atol=1e-12)
    np.testing.assert_allclose(g.sigma.data, [[E, E]], rtol=0, atol=1e-12)


def test_gaussian_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        propagate_gaussian([[0.0]], [[0.0]], [1.0], [1.0], [[0.0]], [[1.0]])
    with pytest.raises(ValueError):
        propagate_gaussian([[0.0]], [[1.0]], [1.0], [1.0], [[0.0]], [[-1.0]])


def test_gaussian_sigma_clamped_positive():
    g = propagate_gaussian([[0.0]], [[1e-4]], [0.0], [100.0], [[0.0]], [[1e-4]])
    assert g.sigma.data[0, 0] == pytest.approx(np.exp(-10.0))


@pytest.mark.parametrize("cls", [StaticKoopman, EigenKoopman])
def test_zero_transition_passes_local_latent(cls, rng):
    h_hat = rng.normal(size=(3, 4))
    h, _ = cls(4)(Tensor(h_hat), Tensor(rng.normal(size=(3, 4))))
    assert np.array_equal(h.data, h_hat)


def test_eigen_matrix_is_diagonal(rng):
    K = EigenKoopman(5, rng).matrix(rng.normal(size=5))
    assert np.count_nonzero(K - np.diag(np.diag(K))) == 0


def test_stochastic_transition_uses_upstream_mean(rng):
    tr = StochasticEigenKoopman(3, rng)
    mu_prev = rng.normal(size=(2, 3))
    g, lam_mu, lam_sigma = tr(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(mu_prev), Tensor(np.ones((2, 3))))
    np.testing.assert_allclose(g.mu.data, lam_mu.data * mu_prev)
    np.testing.assert_allclose(g.log_sigma.data, lam_sigma.data)
    Km, Ks = tr.matrices(mu_prev[0])
    assert np.array_equal(np.diag(Km), lam_mu.data[0]) and np.array_equal(np.diag(Ks), lam_sigma.data[0])
