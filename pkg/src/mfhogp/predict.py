"""Posterior predictive sampling across fidelities and evaluation metrics.

Prediction mirrors the generative story of the trained model. Each posterior
draw walks the fidelity ladder strictly bottom-up: sample every level's
weight matrix from its variational posterior, rebuild that level's augmented
training inputs with the sampled previous-level weights, condition the
level's matrix GP on those sampled weights at the augmented query point, and
sample the query weights. The top level's query weights are pushed through
the stacked bases and observation noise is added, giving one draw of the
predicted field. An ensemble of such draws defines the empirical predictive
distribution; test log-likelihood treats it as an equal-weight Gaussian
mixture centred at the noise-free draws.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels, matnorm, mfmodel, numerics
from .errors import (
    DegenerateEnsemble,
    DimensionMismatch,
    InvalidCounts,
    UntrainedModel,
)
from .mfmodel import GRAM_JITTER, LOG_2PI, ModelState, MultiFidelityDataset

# Ensemble size when the caller does not choose one.
DEFAULT_SAMPLES = 64


@dataclass
class PredictiveEnsemble:
    """Empirical predictive distribution at one query input.

    ``samples`` holds S noisy field draws (one per posterior sample);
    ``latent_means`` holds the matching noise-free draws (query weights
    through the bases, before observation noise). Empirical moments are
    always recomputed from ``samples`` so they match by construction. With
    S=1 the variance is the literal zero vector: a single draw carries only
    its own noise realization and estimates no spread.
    """

    samples: np.ndarray
    latent_means: np.ndarray
    empirical_mean: np.ndarray
    empirical_var: np.ndarray
    noise_precision_used: float

    @classmethod
    def from_draws(cls, samples, latent_means, noise_precision) -> "PredictiveEnsemble":
        samples = np.atleast_2d(np.asarray(samples, np.float64))
        latent_means = np.atleast_2d(np.asarray(latent_means, np.float64))
        if samples.shape != latent_means.shape:
            raise DimensionMismatch(
                f"samples {samples.shape} vs latent means {latent_means.shape}"
            )
        if samples.shape[0] < 1:
            raise InvalidCounts("an ensemble needs at least one draw")
        return cls(
            samples,
            latent_means,
            samples.mean(axis=0),
            samples.var(axis=0),
            float(noise_precision),
        )

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def output_dim(self) -> int:
        return self.samples.shape[1]


@dataclass
class LevelDraw:
    """One level's contribution to a posterior path sample."""

    level: int
    x_augmented: np.ndarray
    w_train: np.ndarray


def sample_weight_path(
    state: ModelState, data: MultiFidelityDataset, rng: numerics.RngStream
) -> list:
    """One joint posterior draw of every level's training weights.

    Levels are sampled strictly in order 1..F; level i's augmented training
    inputs splice in the level-(i-1) weights just drawn, exactly as during
    training. The returned list preserves that order, and downstream
    conditioning must consume it in order.
    """
    draws = []
    w_samples = []
    for i in range(1, state.config.num_levels + 1):
        w = matnorm.sample(mfmodel.variational_dist(state, i), rng)
        w_samples.append(w)
    xs = mfmodel.augmented_training_inputs(state, data, w_samples)
    for i in range(1, state.config.num_levels + 1):
        draws.append(LevelDraw(i, xs[i - 1], w_samples[i - 1]))
    return draws


def _bases_col_cov(state: ModelState, level: int) -> np.ndarray:
    feats = mfmodel.bases_features(state, level)
    return kernels.gram(mfmodel.bases_kernel(state, level), feats, feats)


def _query_weight_draw(state, path, x_stars, rng) -> np.ndarray:
    """Sample top-level query weights by walking the path bottom-up."""
    w_query = None
    for draw in path:
        i = draw.level
        if i == 1:
            q_inputs = x_stars
        else:
            q_inputs = np.hstack([x_stars, w_query])
        cond = matnorm.conditional(
            mfmodel.input_kernel(state, i),
            draw.x_augmented,
            draw.w_train,
            _bases_col_cov(state, i),
            q_inputs,
            jitter=GRAM_JITTER,
        )
        w_query = matnorm.sample(cond, rng)
    return w_query


def predict_many(
    state: ModelState,
    data: MultiFidelityDataset,
    x_stars,
    s_samples: int = DEFAULT_SAMPLES,
    rng: numerics.RngStream = None,
) -> list:
    """Predictive ensembles at several query inputs sharing posterior draws.

    Each posterior sample draws one weight path and conditions all queries
    jointly, so per-query ensembles stay exchangeable while the expensive
    training-side factorizations are shared. Returns one
    :class:`PredictiveEnsemble` per query row.
    """
    if not state.trained:
        raise UntrainedModel("predict requires a trained model state")
    data.validate()
    x_stars = np.atleast_2d(np.asarray(x_stars, np.float64))
    if x_stars.shape[1] != state.config.input_dim:
        raise DimensionMismatch(
            f"query width {x_stars.shape[1]} != input dim {state.config.input_dim}"
        )
    if s_samples < 1:
        raise InvalidCounts(f"need at least one sample, got {s_samples}")
    if rng is None:
        rng = numerics.RngStream(0)
    m, d = x_stars.shape[0], state.config.output_dim
    eta_bar = float(mfmodel.noise_precisions(state)[-1])
    noise_scale = eta_bar ** -0.5
    b_top = mfmodel.stacked_bases(state, state.config.num_levels)
    latents = np.empty((s_samples, m, d))
    noisy = np.empty((s_samples, m, d))
    for s_idx in range(s_samples):
        draw_rng = rng.child(s_idx)
        path = sample_weight_path(state, data, draw_rng)
        w_star = _query_weight_draw(state, path, x_stars, draw_rng)
        latents[s_idx] = w_star @ b_top
        noisy[s_idx] = latents[s_idx] + noise_scale * draw_rng.standard_normal(m, d)
    return [
        PredictiveEnsemble.from_draws(noisy[:, j], latents[:, j], eta_bar)
        for j in range(m)
    ]


def predict(
    state: ModelState,
    data: MultiFidelityDataset,
    x_star,
    s_samples: int = DEFAULT_SAMPLES,
    rng: numerics.RngStream = None,
) -> PredictiveEnsemble:
    """Predictive ensemble at a single query input (see :func:`predict_many`)."""
    x_star = np.asarray(x_star, np.float64)
    if x_star.ndim == 1:
        x_star = x_star[None, :]
    if x_star.shape[0] != 1:
        raise DimensionMismatch(
            f"predict takes one query row, got {x_star.shape[0]}"
        )
    return predict_many(state, data, x_star, s_samples, rng)[0]


def rmse(pred, truth) -> float:
    """Root-mean-square error over all entries of equal-shaped arrays."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def n_rmse(pred, truth) -> float:
    """RMSE normalized by the root-mean-square of the truth entries."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"shape mismatch {pred.shape} vs {truth.shape}")
    return rmse(pred, truth) / float(np.sqrt(np.mean(truth**2)))


def test_log_likelihood(
    ensemble: PredictiveEnsemble, truth, moment_matched: bool = False
) -> float:
    """Log predictive density of ``truth`` under the ensemble.

    Default is the equal-weight mixture (1/S) sum_s N(truth | latent_s,
    eta_bar^{-1} I), evaluated with log-sum-exp so far-away truths stay
    finite. ``moment_matched`` instead scores a diagonal Gaussian with the
    latent draws' mean and variance plus the noise variance, for
    comparability with methods that report Gaussian likelihoods.
    """
    s, d = ensemble.latent_means.shape
    if s < 2:
        raise DegenerateEnsemble(
            f"log-likelihood needs at least 2 samples, got {s}"
        )
    truth = np.asarray(truth, np.float64).reshape(-1)
    if truth.shape != (d,):
        raise DimensionMismatch(f"truth has {truth.size} entries, expected {d}")
    eta = ensemble.noise_precision_used
    if moment_matched:
        mean = ensemble.latent_means.mean(axis=0)
        var = ensemble.latent_means.var(axis=0) + 1.0 / eta
        return float(
            -0.5 * np.sum((truth - mean) ** 2 / var + np.log(var) + LOG_2PI)
        )
    quads = np.sum((ensemble.latent_means - truth[None, :]) ** 2, axis=1)
    log_terms = -0.5 * eta * quads
    return float(
        logsumexp(log_terms) - np.log(s) + 0.5 * d * (np.log(eta) - LOG_2PI)
    )


def summarize(ensembles: list, truth) -> dict:
    """Aggregate metrics of per-query ensembles against true fields.

    Returns RMSE and N-RMSE of the stacked empirical means plus the mean
    per-query test log-likelihood.
    """
    truth = np.atleast_2d(np.asarray(truth, np.float64))
    if len(ensembles) != truth.shape[0]:
        raise DimensionMismatch(
            f"{len(ensembles)} ensembles for {truth.shape[0]} truth rows"
        )
    means = np.vstack([e.empirical_mean for e in ensembles])
    logliks = [
        test_log_likelihood(e, truth[j]) for j, e in enumerate(ensembles)
    ]
    return {
        "rmse": rmse(means, truth),
        "n_rmse": n_rmse(means, truth),
        "loglik": float(np.mean(logliks)),
    }
