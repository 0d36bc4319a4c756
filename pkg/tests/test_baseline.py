"""Tests for the PCA-GP baseline: decomposition, GP fitting, fidelity slices."""

import numpy as np
import pytest

from mfhogp import baseline, numerics
from mfhogp.errors import (
    ConvergenceFailure,
    DimensionMismatch,
    IndexOutOfRange,
    InvalidCounts,
    UntrainedModel,
)
from mfhogp.mfmodel import MultiFidelityDataset


def _rank_k_data(seed, n, d, k, noise=0.0):
    """Outputs living exactly on a k-dimensional affine subspace."""
    rng = numerics.RngStream(seed)
    x = rng.child(0).uniform(-1.0, 1.0, size=(n, 2))
    basis, _ = np.linalg.qr(rng.child(1).standard_normal(d, k))
    coef = np.column_stack(
        [np.sin(np.pi * x[:, 0] * (j + 1)) + x[:, 1] ** (j + 1) for j in range(k)]
    )
    offset = rng.child(2).standard_normal(d)
    y = offset[None, :] + coef @ basis.T
    if noise:
        y = y + noise * rng.child(3).standard_normal(n, d)
    return x, y


class TestDecomposition:
    def test_scores_match_projection_oracle(self):
        x, y = _rank_k_data(0, 24, 15, 3)
        model = baseline.fit_pca_gp(x, y, k=3, noise_variance=1e-8, iters=5)
        centered = y - y.mean(axis=0)
        assert np.allclose(model.scores, centered @ model.bases.T, atol=1e-9)

    def test_bases_rows_orthonormal(self):
        x, y = _rank_k_data(1, 20, 12, 4)
        model = baseline.fit_pca_gp(x, y, k=4, noise_variance=1e-8, iters=5)
        assert np.allclose(model.bases @ model.bases.T, np.eye(4), atol=1e-10)

    def test_full_rank_reconstructs_centered_outputs(self):
        x, y = _rank_k_data(2, 10, 8, 5)
        k = min(y.shape)
        model = baseline.fit_pca_gp(x, y, k=k, noise_variance=1e-8, iters=5)
        recon = model.mean_vector[None, :] + model.scores @ model.bases
        assert np.allclose(recon, y, atol=1e-8)

    def test_component_count_beyond_rank_raises(self):
        x, y = _rank_k_data(3, 6, 9, 2)
        with pytest.raises(IndexOutOfRange):
            baseline.fit_pca_gp(x, y, k=7, noise_variance=1e-8, iters=5)

    def test_mismatched_row_counts_raise(self):
        with pytest.raises(DimensionMismatch):
            baseline.fit_pca_gp(np.zeros((4, 2)), np.zeros((5, 3)), k=1)


class TestPrediction:
    def test_training_inputs_recovered_on_low_rank_data(self):
        x, y = _rank_k_data(4, 30, 20, 2)
        model = baseline.fit_pca_gp(x, y, k=2, noise_variance=1e-8, seed=1)
        mean, var = baseline.predict_pca_gp(model, x)
        assert np.max(np.abs(mean - y)) < 1e-3
        assert var.shape == mean.shape

    def test_zero_components_predicts_training_mean(self):
        x, y = _rank_k_data(5, 12, 7, 3)
        model = baseline.fit_pca_gp(x, y, k=0)
        mean, var = baseline.predict_pca_gp(model, np.zeros((4, 2)))
        assert np.allclose(mean, np.tile(y.mean(axis=0), (4, 1)))
        assert np.allclose(var, 0.0)

    def test_far_queries_revert_to_training_mean(self):
        x, y = _rank_k_data(6, 25, 10, 2)
        model = baseline.fit_pca_gp(x, y, k=2, noise_variance=1e-6)
        mean, _ = baseline.predict_pca_gp(model, np.full((1, 2), 80.0))
        assert np.allclose(mean[0], y.mean(axis=0), atol=1e-6)

    def test_variances_nonnegative_everywhere(self):
        x, y = _rank_k_data(7, 18, 9, 3, noise=0.05)
        model = baseline.fit_pca_gp(x, y, k=3, seed=2)
        queries = numerics.RngStream(70).uniform(-3.0, 3.0, size=(100, 2))
        _, var = baseline.predict_pca_gp(model, queries)
        assert np.all(var >= 0.0)

    def test_untrained_model_rejected(self):
        model = baseline.PcaGpModel(
            np.zeros(3), np.zeros((0, 3)), np.zeros((2, 0)), [], trained=False
        )
        with pytest.raises(UntrainedModel):
            baseline.predict_pca_gp(model, np.zeros((1, 2)))

    def test_non_finite_training_outputs_raise(self):
        x, y = _rank_k_data(8, 10, 6, 2)
        y[3, 2] = np.nan
        with pytest.raises(ConvergenceFailure):
            baseline.fit_pca_gp(x, y, k=2, iters=20)


class TestLogLikelihood:
    def test_matches_manual_diagonal_gaussian(self):
        mean = np.array([0.5, -1.0])
        var = np.array([0.25, 4.0])
        truth = np.array([1.0, 0.0])
        manual = sum(
            -0.5 * ((t - m) ** 2 / v + np.log(2.0 * np.pi * v))
            for m, v, t in zip(mean, var, truth)
        )
        got = baseline.gaussian_log_likelihood(mean, var, truth)
        assert got == pytest.approx(manual, abs=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionMismatch):
            baseline.gaussian_log_likelihood(np.zeros(3), np.ones(3), np.zeros(4))


def _nested_three_level(seed=0):
    rng = numerics.RngStream(seed)
    n1, n2, n3, s, d = 9, 5, 2, 2, 4
    xs1 = rng.child(0).uniform(0.0, 1.0, size=(n1, s))
    map2 = rng.child(1).choice_without_replacement(n1, n2)
    map3 = rng.child(2).choice_without_replacement(n2, n3)
    xs = [xs1, xs1[map2], xs1[map2][map3]]
    ys = [
        float(i + 1) * np.arange(x.shape[0] * d).reshape(x.shape[0], d)
        + float(i)
        for i, x in enumerate(xs)
    ]
    maps = [None, map2, map3]
    return MultiFidelityDataset(xs, ys, maps), map2, map3


class TestTrainingSlice:
    def test_lowest_and_highest_modes(self):
        data, _, _ = _nested_three_level()
        x1, y1 = baseline.training_slice(data, "f1")
        assert np.array_equal(x1, data.xs[0]) and np.array_equal(y1, data.ys[0])
        xt, yt = baseline.training_slice(data, "ftop")
        assert np.array_equal(xt, data.xs[-1]) and np.array_equal(yt, data.ys[-1])

    def test_union_keeps_highest_fidelity_outputs(self):
        data, map2, map3 = _nested_three_level()
        x, y = baseline.training_slice(data, "all")
        assert np.array_equal(x, data.xs[0])
        expected = data.ys[0].copy()
        expected[map2] = data.ys[1]
        expected[map2[map3]] = data.ys[2]
        assert np.array_equal(y, expected)
        # rows never solved above level 1 keep their level-1 outputs
        untouched = np.setdiff1d(np.arange(9), map2)
        assert np.array_equal(y[untouched], data.ys[0][untouched])

    def test_union_size_matches_level_one(self):
        data, _, _ = _nested_three_level(3)
        x, y = baseline.training_slice(data, "all")
        assert x.shape[0] == data.counts[0]
        assert y.shape[0] == data.counts[0]

    def test_unknown_mode_raises(self):
        data, _, _ = _nested_three_level()
        with pytest.raises(InvalidCounts):
            baseline.training_slice(data, "best")

    def test_slices_are_copies(self):
        data, _, _ = _nested_three_level()
        x, y = baseline.training_slice(data, "f1")
        x[0, 0] = 99.0
        y[0, 0] = 99.0
        assert data.xs[0][0, 0] != 99.0 and data.ys[0][0, 0] != 99.0


class TestHyperparameterFit:
    def test_learned_noise_tracks_injected_noise(self):
        x, y = _rank_k_data(9, 60, 6, 1, noise=0.1)
        model = baseline.fit_pca_gp(x, y, k=1, iters=300, seed=3)
        learned = np.exp(model.gps[0].log_noise_variance)
        # score column 0 carries the (scaled) noise; just demand the right decade
        assert 1e-4 < learned < 1.0

    def test_fixed_noise_respected(self):
        x, y = _rank_k_data(10, 15, 5, 2)
        model = baseline.fit_pca_gp(x, y, k=2, noise_variance=1e-7, iters=10)
        for gp in model.gps:
            assert gp.log_noise_variance == pytest.approx(np.log(1e-7))

    def test_restarts_improve_or_match_single_start(self):
        x, y = _rank_k_data(11, 20, 8, 2, noise=0.02)
        single = baseline.fit_pca_gp(x, y, k=2, restarts=1, iters=150, seed=4)
        multi = baseline.fit_pca_gp(x, y, k=2, restarts=3, iters=150, seed=4)
        for gp_s, gp_m in zip(single.gps, multi.gps):
            assert gp_m.log_marginal_likelihood >= gp_s.log_marginal_likelihood - 1e-9
