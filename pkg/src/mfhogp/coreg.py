"""Nonlinear coregionalization over thousands of outputs at one fidelity.

The model couples d outputs through K basis rows: W ~ MN(0, K(X, X), K_BB)
with K_BB a kernel gram over the bases themselves, and Y | W is
vec(W B) plus isotropic noise of precision eta. Marginalizing W gives a
Gaussian with covariance (B^T K_BB B) kron K + (1/eta) I whose rank-K
structure makes the exact likelihood computable without ever forming an
(N d) x (N d) matrix: only the K nonzero eigenpairs of B^T K_BB B and the
N eigenpairs of K enter. A dense path exists purely as a small-problem
oracle. A delta bases kernel collapses the model to classic linear
coregionalization with one shared kernel.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels, numerics
from .errors import DimensionMismatch, OverflowingDimensions

LOG_2PI = float(np.log(2.0 * np.pi))

# Largest N*d for which dense covariance construction is allowed.
DENSE_LIMIT = 4096

_EIG_REL_TOL = 1e-12


@dataclass
class CoregModel:
    """Bases (K x d), the two kernels, and the log noise precision."""

    bases: np.ndarray
    input_kernel: kernels.RbfKernel
    bases_kernel: object
    log_noise_precision: float = 0.0

    def __post_init__(self):
        self.bases = np.atleast_2d(np.asarray(self.bases, dtype=np.float64))
        self.log_noise_precision = float(self.log_noise_precision)

    @property
    def noise_precision(self) -> float:
        return float(np.exp(self.log_noise_precision))


def _bases_gram(model: CoregModel) -> np.ndarray:
    # At a single fidelity the bases kernel sees the expanded basis rows.
    return kernels.gram(model.bases_kernel, model.bases, model.bases)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _output_factor(bases: np.ndarray, bases_gram: np.ndarray):
    """Nonzero eigenpairs (lam, V) of A = B^T K_BB B without forming A.

    Works through the K x K matrix K_BB^{1/2} B B^T K_BB^{1/2}, which shares
    its nonzero spectrum with A; eigenvectors lift back through B.
    Returns lam (descending, > 0) and V (d x k_eff) with orthonormal columns.
    """
    root = _psd_sqrt(bases_gram)
    small = root @ (bases @ bases.T) @ root
    vals, vecs = np.linalg.eigh(0.5 * (small + small.T))
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    cutoff = max(vals[0], 0.0) * _EIG_REL_TOL if vals.size else 0.0
    keep = vals > cutoff
    lam = vals[keep]
    if lam.size == 0:
        return lam, np.zeros((bases.shape[1], 0))
    v = bases.T @ (root @ vecs[:, keep]) / np.sqrt(lam)
    return lam, v


def _structured_mll(bases, bases_gram, kx, eta, y) -> float:
    n, d = y.shape
    lam, v = _output_factor(bases, bases_gram)
    s_vals, u = np.linalg.eigh(0.5 * (kx + kx.T))
    s_vals = np.maximum(s_vals, 0.0)
    inv_eta = 1.0 / eta
    yy = float(np.sum(y * y))
    if lam.size == 0:
        logdet = n * d * np.log(inv_eta)
        quad = eta * yy
    else:
        p = y @ v                       # (n, k_eff)
        t = u.T @ p                     # (n, k_eff)
        denom = np.outer(s_vals, lam) + inv_eta
        quad = float(np.sum(t * t / denom)) + eta * (yy - float(np.sum(p * p)))
        logdet = float(np.sum(np.log(denom))) + (d - lam.size) * n * np.log(inv_eta)
    return -0.5 * (n * d * LOG_2PI + logdet + quad)


def dense_covariance(model: CoregModel, x) -> np.ndarray:
    """Full (N d) x (N d) covariance of the column-stacked outputs.

    Index (m * N + n) is output m at input row n. Guarded to small problems;
    exists as the oracle for the structured path and for MC checks.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape[0], model.bases.shape[1]
    if n * d > DENSE_LIMIT:
        raise OverflowingDimensions(
            f"dense covariance limited to N*d <= {DENSE_LIMIT}, got {n * d}"
        )
    kx = kernels.gram(model.input_kernel, x, x)
    a = model.bases.T @ _bases_gram(model) @ model.bases
    return numerics.kron(a, kx) + (1.0 / model.noise_precision) * np.eye(n * d)


def marginal_log_likelihood(model: CoregModel, x, y, method: str = "structured") -> float:
    """Exact log marginal likelihood of outputs ``y`` at inputs ``x``.

    ``method="structured"`` exploits the rank-K output covariance;
    ``method="dense"`` builds the full covariance (N*d <= 4096 only).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"{y.shape[0]} output rows for {x.shape[0]} inputs")
    if y.shape[1] != model.bases.shape[1]:
        raise DimensionMismatch(
            f"outputs have width {y.shape[1]}, bases have {model.bases.shape[1]}"
        )
    if method == "dense":
        cov = dense_covariance(model, x)
        fac = numerics.cholesky(cov, jitter=0.0)
        from scipy.linalg import solve_triangular

        white = solve_triangular(fac.lower, y.reshape(-1, order="F"), lower=True)
        return -0.5 * (
            y.size * LOG_2PI + fac.logdet() + float(white @ white)
        )
    if method != "structured":
        raise DimensionMismatch(f"unknown method {method!r}")
    kx = kernels.gram(model.input_kernel, x, x)
    return _structured_mll(
        model.bases, _bases_gram(model), kx, model.noise_precision, y
    )


def lmc_log_likelihood(bases, input_kernel, log_noise_precision, x, y) -> float:
    """Marginal likelihood of linear coregionalization with one shared kernel.

    cov = (B^T B) kron K + (1/eta) I; the collapse target of a delta bases
    kernel with unit amplitude.
    """
    bases = np.atleast_2d(np.asarray(bases, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    kx = kernels.gram(input_kernel, x, x)
    return _structured_mll(
        bases, np.eye(bases.shape[0]), kx, float(np.exp(log_noise_precision)), y
    )


def generative_sample(model: CoregModel, x, rng: numerics.RngStream) -> np.ndarray:
    """One draw of Y at inputs ``x`` from the generative model."""
    return generative_samples(model, x, rng, 1)[0]


def generative_samples(model: CoregModel, x, rng: numerics.RngStream, count: int) -> np.ndarray:
    """Vectorized draws, shape (count, N, d); used for MC covariance checks."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape[0], model.bases.shape[1]
    k = model.bases.shape[0]
    kx = kernels.gram(model.input_kernel, x, x)
    lx = numerics.cholesky(kx, jitter=1e-10).lower
    lb = numerics.cholesky(_bases_gram(model), jitter=1e-10).lower
    z = rng.standard_normal(count, n, k)
    w = np.einsum("ij,sjk,lk->sil", lx, z, lb)
    noise = rng.standard_normal(count, n, d) / np.sqrt(model.noise_precision)
    return w @ model.bases + noise
