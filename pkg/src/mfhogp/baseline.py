"""PCA-GP reference: principal-component bases with independent scalar GPs.

The baseline centers the training outputs, takes the top-K right singular
vectors as fixed orthonormal bases, and fits one exact scalar GP (ARD RBF
plus learned or fixed observation noise) per singular-value-scaled score
column. Hyperparameters maximize the exact log marginal likelihood by Adam
ascent from several seeded restarts. Prediction recombines per-component GP
means through the bases and propagates per-component variances, which stay
diagonal in output space because the bases are orthonormal.

Fidelity handling is delegated to :func:`training_slice`: the baseline can
train on the lowest fidelity only, the highest only, or the nested union in
which duplicated design points keep their highest-fidelity output.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from . import kernels, numerics
from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    InvalidCounts,
    UntrainedModel,
)
from .mfmodel import MultiFidelityDataset

# Base jitter inside every kernel factorization (absorbed by learned noise).
GP_JITTER = 1e-10

TRAINING_MODES = ("f1", "ftop", "all")


@dataclass
class ScalarGp:
    """One trained RBF + noise GP on a scalar score column."""

    x_train: np.ndarray
    y_train: np.ndarray
    log_lengthscales: np.ndarray
    log_amplitude: float
    log_noise_variance: float
    chol: np.ndarray
    weights: np.ndarray
    log_marginal_likelihood: float

    @property
    def kernel(self) -> kernels.RbfKernel:
        return kernels.RbfKernel(self.log_lengthscales, self.log_amplitude)


@dataclass
class PcaGpModel:
    """Orthonormal output bases plus one scalar GP per component."""

    mean_vector: np.ndarray
    bases: np.ndarray
    scores: np.ndarray
    gps: list
    trained: bool = False

    @property
    def num_components(self) -> int:
        return self.bases.shape[0]

    @property
    def output_dim(self) -> int:
        return self.mean_vector.shape[0]


def _gp_graph(x, y, log_ls, log_amp, log_noise):
    """Log marginal likelihood graph of a scalar GP; returns the root Var."""
    n = x.shape[0]
    xc = ad.constant(x)
    kxx = ad.rbf_gram(xc, xc, log_ls, log_amp)
    noise_diag = ad.diag_embed(ad.mul(ad.exp(log_noise), np.ones(n)))
    lchol = ad.cholesky(ad.add(kxx, noise_diag), jitter=GP_JITTER)
    white = ad.solve_lower(lchol, ad.constant(y[:, None]))
    return ad.mul(
        ad.add(
            ad.add(ad.frob2(white), ad.logdet_from_chol(lchol)),
            n * np.log(2.0 * np.pi),
        ),
        -0.5,
    )


def _train_scalar_gp(
    x, y, noise_variance, restarts, iters, learning_rate, rng
) -> ScalarGp:
    """Multi-restart Adam ascent on the exact log marginal likelihood."""
    n, s = x.shape
    base_ls = np.log(np.maximum(x.std(axis=0), 1e-2))
    y_scale = max(float(y.std()), 1e-8)
    best = None
    for restart in range(restarts):
        r = rng.child(restart)
        params = {
            "log_ls": base_ls + (0.3 * r.standard_normal(s) if restart else 0.0),
            "log_amp": np.asarray(
                2.0 * np.log(y_scale) + (0.3 * r.standard_normal() if restart else 0.0)
            ),
        }
        if noise_variance is None:
            params["log_noise"] = np.asarray(np.log(0.01 * y_scale**2 + 1e-10))
        names = sorted(params)
        m = {k: np.zeros_like(params[k]) for k in names}
        v = {k: np.zeros_like(params[k]) for k in names}
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        value = -np.inf
        for step in range(iters):
            leaves = {k: ad.Var(params[k]) for k in names}
            log_noise = (
                leaves["log_noise"]
                if noise_variance is None
                else ad.constant(np.log(noise_variance))
            )
            root = _gp_graph(x, y, leaves["log_ls"], leaves["log_amp"], log_noise)
            value = root.item()
            if not np.isfinite(value):
                break
            ad.backward(root)
            t = step + 1
            for k in names:
                g = leaves[k].grad
                if g is None:
                    g = np.zeros_like(params[k])
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                params[k] = params[k] + learning_rate * (
                    m[k] / (1 - beta1**t)
                ) / (np.sqrt(v[k] / (1 - beta2**t)) + eps)
        if np.isfinite(value) and (best is None or value > best[0]):
            best = (value, {k: np.array(p) for k, p in params.items()})
    if best is None:
        raise ConvergenceFailure(
            "every hyperparameter restart produced a non-finite likelihood"
        )
    value, params = best
    log_noise = (
        float(params["log_noise"])
        if noise_variance is None
        else float(np.log(noise_variance))
    )
    kern = kernels.RbfKernel(params["log_ls"], float(params["log_amp"]))
    kxx = kernels.gram(kern, x, x) + np.exp(log_noise) * np.eye(n)
    chol = numerics.cholesky(kxx, jitter=GP_JITTER).lower
    half = solve_triangular(chol, y, lower=True)
    weights = solve_triangular(chol.T, half, lower=False)
    return ScalarGp(
        x,
        y,
        params["log_ls"],
        float(params["log_amp"]),
        log_noise,
        chol,
        weights,
        float(value),
    )


def fit_pca_gp(
    x,
    y,
    k: int,
    noise_variance: float = None,
    restarts: int = 3,
    iters: int = 200,
    learning_rate: float = 0.05,
    seed: int = 0,
) -> PcaGpModel:
    """Center outputs, take top-``k`` singular bases, train the score GPs.

    ``noise_variance`` fixes every GP's noise instead of learning it, which
    makes the GPs interpolate (near-)exactly for noise-free data.
    """
    x = np.atleast_2d(np.asarray(x, np.float64))
    y = np.atleast_2d(np.asarray(y, np.float64))
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} inputs for {y.shape[0]} outputs")
    mean_vector = y.mean(axis=0)
    centered = y - mean_vector
    u, s_vals, vt = numerics.thin_svd(centered, k)
    scores = u * s_vals[None, :]
    rng = numerics.RngStream(seed)
    gps = [
        _train_scalar_gp(
            x,
            scores[:, j],
            noise_variance,
            restarts,
            iters,
            learning_rate,
            rng.child(j),
        )
        for j in range(k)
    ]
    return PcaGpModel(mean_vector, vt, scores, gps, trained=True)


def gp_predict(gp: ScalarGp, x_star) -> tuple:
    """Predictive mean and variance (including noise) of one scalar GP."""
    x_star = np.atleast_2d(np.asarray(x_star, np.float64))
    k_star = kernels.gram(gp.kernel, x_star, gp.x_train)
    mean = k_star @ gp.weights
    half = solve_triangular(gp.chol, k_star.T, lower=True)
    prior_var = np.exp(gp.log_amplitude)
    var = prior_var - np.sum(half * half, axis=0) + np.exp(gp.log_noise_variance)
    return mean, np.maximum(var, 0.0)


def predict_pca_gp(model: PcaGpModel, x_star) -> tuple:
    """Mean and per-output variance vectors at the query inputs.

    Means recombine the per-component GP means through the bases; variances
    propagate as sum_k var_k(x) * basis_k^2 because the bases rows are
    orthonormal, so component covariances stay diagonal in output space.
    """
    if not model.trained:
        raise UntrainedModel("predict requires a fitted PCA-GP model")
    x_star = np.atleast_2d(np.asarray(x_star, np.float64))
    m = x_star.shape[0]
    mean = np.tile(model.mean_vector, (m, 1))
    var = np.zeros((m, model.output_dim))
    for j, gp in enumerate(model.gps):
        gp_mean, gp_var = gp_predict(gp, x_star)
        mean += gp_mean[:, None] * model.bases[j][None, :]
        var += gp_var[:, None] * (model.bases[j] ** 2)[None, :]
    return mean, var


def gaussian_log_likelihood(mean, var, truth) -> float:
    """Diagonal-Gaussian log density of one truth row (for benchmark scoring)."""
    mean = np.asarray(mean, np.float64).reshape(-1)
    var = np.maximum(np.asarray(var, np.float64).reshape(-1), 1e-300)
    truth = np.asarray(truth, np.float64).reshape(-1)
    if mean.shape != truth.shape or var.shape != truth.shape:
        raise DimensionMismatch("mean, var, and truth must share one shape")
    return float(
        -0.5
        * np.sum((truth - mean) ** 2 / var + np.log(var) + np.log(2.0 * np.pi))
    )


def _maps_to_level1(data: MultiFidelityDataset) -> list:
    """Per level, each row's index in the level-1 design."""
    maps = [np.arange(data.counts[0])]
    for i in range(1, data.num_levels):
        maps.append(maps[i - 1][data.parent_maps[i]])
    return maps


def training_slice(data: MultiFidelityDataset, mode: str) -> tuple:
    """(x, y) training arrays for one baseline fidelity mode.

    ``f1`` uses the lowest fidelity, ``ftop`` the highest, and ``all`` the
    nested union in which each design point keeps the output of the highest
    fidelity that solved it.
    """
    mode = str(mode).lower()
    if mode not in TRAINING_MODES:
        raise InvalidCounts(f"mode must be one of {TRAINING_MODES}, got {mode!r}")
    data.validate()
    if mode == "f1":
        return data.xs[0].copy(), data.ys[0].copy()
    if mode == "ftop":
        return data.xs[-1].copy(), data.ys[-1].copy()
    maps = _maps_to_level1(data)
    y = data.ys[0].copy()
    for i in range(1, data.num_levels):
        y[maps[i]] = data.ys[i]
    return data.xs[0].copy(), y
