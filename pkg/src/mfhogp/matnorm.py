"""Matrix normal distributions: density, sampling, KL, GP conditionals.

A matrix normal MN(M, Sigma, Omega) over n x p matrices is the Gaussian with
column-stacked covariance kron(Omega, Sigma). Distributions are carried
around by their Cholesky factors so sampling and densities never rebuild
dense Kronecker covariances.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels, numerics
from .errors import DimensionMismatch

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MatrixGaussian:
    """MN(mean, row_chol @ row_chol.T, col_chol @ col_chol.T)."""

    mean: np.ndarray
    row_chol: np.ndarray
    col_chol: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_2d(np.asarray(self.mean, dtype=np.float64))
        n, p = self.mean.shape
        if self.row_chol.shape != (n, n) or self.col_chol.shape != (p, p):
            raise DimensionMismatch(
                f"mean {self.mean.shape} needs row factor ({n},{n}) and "
                f"col factor ({p},{p}), got {self.row_chol.shape} and "
                f"{self.col_chol.shape}"
            )

    @classmethod
    def from_covariances(cls, mean, row_cov, col_cov, jitter=0.0):
        return cls(
            mean,
            numerics.cholesky(row_cov, jitter=jitter).lower,
            numerics.cholesky(col_cov, jitter=jitter).lower,
        )

    @property
    def shape(self):
        return self.mean.shape


def _logdet(lower):
    return 2.0 * float(np.sum(np.log(np.diag(lower))))


def log_density(dist: MatrixGaussian, w) -> float:
    """Log density of ``w`` under ``dist``.

    Equals the multivariate-normal log density with covariance
    kron(col_cov, row_cov) evaluated at the column-stacked ``w``.
    """
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if w.shape != dist.shape:
        raise DimensionMismatch(f"w has shape {w.shape}, expected {dist.shape}")
    n, p = dist.shape
    delta = w - dist.mean
    half = solve_triangular(dist.row_chol, delta, lower=True)
    white = solve_triangular(dist.col_chol, half.T, lower=True)
    quad = float(np.sum(white * white))
    return -0.5 * (
        n * p * LOG_2PI + p * _logdet(dist.row_chol) + n * _logdet(dist.col_chol) + quad
    )


def sample(dist: MatrixGaussian, rng: numerics.RngStream) -> np.ndarray:
    """Reparameterized draw ``mean + L Z R^T`` with Z i.i.d. standard normal."""
    n, p = dist.shape
    z = rng.standard_normal(n, p)
    return dist.mean + dist.row_chol @ z @ dist.col_chol.T


def kl_divergence(a: MatrixGaussian, b: MatrixGaussian) -> float:
    """KL(a || b) between matrix normals of the same shape (closed form)."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    n, p = a.shape
    # tr(Sigma_b^{-1} Sigma_a) via whitened factors, same for columns.
    row_white = solve_triangular(b.row_chol, a.row_chol, lower=True)
    col_white = solve_triangular(b.col_chol, a.col_chol, lower=True)
    tr_row = float(np.sum(row_white * row_white))
    tr_col = float(np.sum(col_white * col_white))
    delta = a.mean - b.mean
    half = solve_triangular(b.row_chol, delta, lower=True)
    white = solve_triangular(b.col_chol, half.T, lower=True)
    quad = float(np.sum(white * white))
    logdets = (
        p * (_logdet(b.row_chol) - _logdet(a.row_chol))
        + n * (_logdet(b.col_chol) - _logdet(a.col_chol))
    )
    return 0.5 * (tr_row * tr_col + quad - n * p + logdets)


def conditional(kernel, x_train, w_train, col_cov, x_query, jitter=1e-8) -> MatrixGaussian:
    """Posterior of query weight rows given training rows of a matrix GP.

    Under W ~ MN(0, K(X, X), Omega), the rows at new inputs satisfy
    w* | W ~ MN(K*x K^{-1} W, K** - K*x K^{-1} Kx*, Omega).
    """
    x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
    x_query = np.atleast_2d(np.asarray(x_query, dtype=np.float64))
    w_train = np.atleast_2d(np.asarray(w_train, dtype=np.float64))
    if w_train.shape[0] != x_train.shape[0]:
        raise DimensionMismatch(
            f"{w_train.shape[0]} weight rows for {x_train.shape[0]} inputs"
        )
    kxx = kernels.gram(kernel, x_train, x_train)
    kxq = kernels.gram(kernel, x_train, x_query)
    kqq = kernels.gram(kernel, x_query, x_query)
    lx = numerics.cholesky(kxx, jitter=jitter).lower
    a = solve_triangular(lx, kxq, lower=True)
    white_w = solve_triangular(lx, w_train, lower=True)
    mean = a.T @ white_w
    row_cov = kqq - a.T @ a
    row_chol = numerics.cholesky(row_cov, jitter=jitter).lower
    col_chol = numerics.cholesky(col_cov, jitter=jitter).lower
    return MatrixGaussian(mean, row_chol, col_chol)
