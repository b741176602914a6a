"""
Koopman transitions between adjacent stages.

Three transition flavours are supported:

* ``StaticKoopman`` -- a trainable dense ``d_h x d_h`` matrix.
* ``EigenKoopman`` -- a diagonal matrix whose eigenvalues come from an
  auxiliary network evaluated on the upstream latent state.
* ``StochasticEigenKoopman`` -- a pair of diagonal matrices (mean and
  log-scale) driven by two auxiliary networks.

Diagonal transitions are applied as an elementwise product with the
eigenvalue vector; :func:`build_koopman` materialises the matrix for export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .nn import LOG_SIGMA_MAX, LOG_SIGMA_MIN, AuxiliaryEigenNet, Module
from .numcore import Tensor


@dataclass
class LatentGaussian:
    mu: Tensor
    sigma: Tensor
    log_sigma: Tensor


def build_koopman(eigenvalues) -> np.ndarray:
    """Diagonal Koopman matrix with ``eigenvalues`` on the diagonal."""
    lam = np.asarray(eigenvalues.data if isinstance(eigenvalues, Tensor) else eigenvalues, dtype=np.float64)
    if lam.ndim != 1:
        raise nc.ShapeError(f"build_koopman: expected a vector of eigenvalues, got shape {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise ValueError("build_koopman: eigenvalues must be finite")
    return np.diag(lam)


def propagate_deterministic(h_hat, h_prev=None, *, matrix=None, eigenvalues=None) -> Tensor:
    """``H_k = H_hat_k + K H_{k-1}``.

    Pass either a dense ``matrix`` (``d x d``) or diagonal ``eigenvalues``
    (a ``d`` vector or a per-row ``n x d`` batch). With ``h_prev=None`` this is
    the first stage and ``h_hat`` is returned unchanged.
    """
    h_hat = nc.as_tensor(h_hat)
    if h_prev is None:
        return h_hat
    h_prev = nc.as_tensor(h_prev)
    if h_prev.shape != h_hat.shape:
        raise nc.ShapeError(f"propagate: h_hat {h_hat.shape} and h_prev {h_prev.shape} differ")
    if (matrix is None) == (eigenvalues is None):
        raise ValueError("propagate: give exactly one of matrix or eigenvalues")
    if matrix is not None:
        matrix = nc.as_tensor(matrix)
        d = h_prev.shape[-1]
        if matrix.shape != (d, d):
            raise nc.ShapeError(f"propagate: matrix shape {matrix.shape} does not match latent width {d}")
        carried = nc.matmul(h_prev, matrix.T)
    else:
        carried = nc.mul(nc.as_tensor(eigenvalues), h_prev)
    return nc.add(h_hat, carried)


def propagate_log_gaussian(mu_hat, log_sigma_hat, lam_mu, lam_sigma, mu_prev, log_sigma_prev) -> LatentGaussian:
    """Gaussian propagation working on log standard deviations directly."""
    mu = nc.add(mu_hat, nc.mul(lam_mu, mu_prev))
    log_sigma = nc.clamp(nc.add(log_sigma_hat, nc.mul(lam_sigma, log_sigma_prev)), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return LatentGaussian(mu, nc.exp(log_sigma), log_sigma)


def propagate_gaussian(mu_hat, sigma_hat, lam_mu, lam_sigma, mu_prev, sigma_prev) -> LatentGaussian:
    """Propagate mean linearly and standard deviation linearly in log space.

    ``mu_k = mu_hat + diag(lam_mu) mu_prev`` and
    ``ln sigma_k = ln sigma_hat + diag(lam_sigma) ln sigma_prev``, with the
    log scale clamped to ``[-10, 10]`` so ``sigma_k`` stays strictly positive.
    """
    tensors = [nc.as_tensor(t) for t in (mu_hat, sigma_hat, lam_mu, lam_sigma, mu_prev, sigma_prev)]
    mu_hat, sigma_hat, lam_mu, lam_sigma, mu_prev, sigma_prev = tensors
    shape = mu_hat.shape
    for name, t in zip(("sigma_hat", "mu_prev", "sigma_prev"), (sigma_hat, mu_prev, sigma_prev)):
        if t.shape != shape:
            raise nc.ShapeError(f"propagate_gaussian: {name} shape {t.shape} differs from mu_hat {shape}")
    if np.any(sigma_hat.data <= 0) or np.any(sigma_prev.data <= 0):
        raise ValueError("propagate_gaussian: standard deviations must be strictly positive")
    return propagate_log_gaussian(mu_hat, nc.log(sigma_hat), lam_mu, lam_sigma, mu_prev, nc.log(sigma_prev))


class StaticKoopman(Module):
    kind = "static"

    def __init__(self, d_h: int, rng: np.random.Generator | None = None):
        bound = 0.1 / math.sqrt(d_h)
        k = rng.uniform(-bound, bound, size=(d_h, d_h)) if rng is not None else np.zeros((d_h, d_h))
        self.K = Tensor(k, requires_grad=True)

    def __call__(self, h_hat: Tensor, h_prev: Tensor) -> tuple[Tensor, None]:
        return propagate_deterministic(h_hat, h_prev, matrix=self.K), None

    def matrix(self, h_prev=None) -> np.ndarray:
        return self.K.data.copy()


class EigenKoopman(Module):
    kind = "eigen"

    def __init__(self, d_h: int, rng: np.random.Generator | None = None):
        self.aux = AuxiliaryEigenNet(d_h, rng)

    def eigenvalues(self, h_prev) -> Tensor:
        return self.aux(nc.as_tensor(h_prev))

    def __call__(self, h_hat: Tensor, h_prev: Tensor) -> tuple[Tensor, Tensor]:
        lam = self.eigenvalues(h_prev)
        return propagate_deterministic(h_hat, h_prev, eigenvalues=lam), lam

    def matrix(self, h_prev) -> np.ndarray:
        """Transition matrix for a single upstream state vector."""
        h = np.asarray(h_prev, dtype=np.float64).reshape(1, -1)
        return build_koopman(self.eigenvalues(h).data[0])


class StochasticEigenKoopman(Module):
    """Mean and log-scale operators, both fed with the upstream mean."""

    kind = "stochastic"

    def __init__(self, d_h: int, rng: np.random.Generator | None = None):
        self.aux_mu = AuxiliaryEigenNet(d_h, rng)
        self.aux_sigma = AuxiliaryEigenNet(d_h, rng)

    def eigenvalues(self, mu_prev) -> tuple[Tensor, Tensor]:
        mu_prev = nc.as_tensor(mu_prev)
        return self.aux_mu(mu_prev), self.aux_sigma(mu_prev)

    def __call__(self, mu_hat, log_sigma_hat, mu_prev, log_sigma_prev):
        lam_mu, lam_sigma = self.eigenvalues(mu_prev)
        g = propagate_log_gaussian(mu_hat, log_sigma_hat, lam_mu, lam_sigma, mu_prev, log_sigma_prev)
        return g, lam_mu, lam_sigma

    def matrices(self, mu_prev) -> tuple[np.ndarray, np.ndarray]:
        h = np.asarray(mu_prev, dtype=np.float64).reshape(1, -1)
        lam_mu, lam_sigma = self.eigenvalues(h)
        return build_koopman(lam_mu.data[0]), build_koopman(lam_sigma.data[0])


TRANSITIONS = {
    "static": StaticKoopman,
    "eigen": EigenKoopman,
    "stochastic": StochasticEigenKoopman,
}
