"""Matrix normal density, sampling, KL, and conditional tests."""

import numpy as np
import pytest

from mfhogp import kernels, matnorm, numerics
from mfhogp.errors import DimensionMismatch


def _random_dist(rng, n, p, mean_scale=1.0):
    gr = rng.standard_normal((n, n))
    gc = rng.standard_normal((p, p))
    row = gr @ gr.T + n * np.eye(n)
    col = gc @ gc.T + p * np.eye(p)
    mean = mean_scale * rng.standard_normal((n, p))
    return matnorm.MatrixGaussian.from_covariances(mean, row, col)


def _mvn_logpdf(x, mean, cov):
    d = x.size
    delta = x - mean
    l = np.linalg.cholesky(cov)
    white = np.linalg.solve(l, delta)
    return -0.5 * (
        d * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(l))) + white @ white
    )


class TestLogDensity:
    def test_scalar_standard_normal(self):
        dist = matnorm.MatrixGaussian.from_covariances([[0.0]], [[1.0]], [[1.0]])
        assert np.isclose(matnorm.log_density(dist, [[0.0]]), -0.5 * np.log(2 * np.pi))

    def test_identity_covariances_at_zero(self):
        dist = matnorm.MatrixGaussian.from_covariances(
            np.zeros((2, 3)), np.eye(2), np.eye(3)
        )
        assert np.isclose(
            matnorm.log_density(dist, np.zeros((2, 3))), -3.0 * np.log(2 * np.pi)
        )

    def test_matches_dense_multivariate_normal(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            n, p = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            dist = _random_dist(rng, n, p)
            w = rng.standard_normal((n, p))
            row_cov = dist.row_chol @ dist.row_chol.T
            col_cov = dist.col_chol @ dist.col_chol.T
            dense = _mvn_logpdf(
                w.reshape(-1, order="F"),
                dist.mean.reshape(-1, order="F"),
                np.kron(col_cov, row_cov),
            )
            assert np.isclose(matnorm.log_density(dist, w), dense, atol=1e-9)

    def test_finite_on_many_draws(self):
        rng = np.random.default_rng(5)
        dist = _random_dist(rng, 3, 4)
        stream = numerics.RngStream(11)
        vals = [
            matnorm.log_density(dist, matnorm.sample(dist, stream.child(i)))
            for i in range(1000)
        ]
        assert np.all(np.isfinite(vals))

    def test_shape_mismatch_rejected(self):
        dist = matnorm.MatrixGaussian.from_covariances(
            np.zeros((2, 2)), np.eye(2), np.eye(2)
        )
        with pytest.raises(DimensionMismatch):
            matnorm.log_density(dist, np.zeros((3, 2)))


class TestSampling:
    def test_reparameterized_moments(self):
        # E[(W-M)(W-M)^T] = Sigma tr(Omega); E[(W-M)^T(W-M)] = Omega tr(Sigma).
        rng = np.random.default_rng(6)
        dist = _random_dist(rng, 2, 3)
        stream = numerics.RngStream(77)
        draws = np.stack(
            [matnorm.sample(dist, stream.child(i)) for i in range(100_000)]
        )
        centered = draws - dist.mean
        row_emp = np.einsum("kij,klj->il", centered, centered) / draws.shape[0]
        col_emp = np.einsum("kji,kjl->il", centered, centered) / draws.shape[0]
        row_cov = dist.row_chol @ dist.row_chol.T
        col_cov = dist.col_chol @ dist.col_chol.T
        row_expect = row_cov * np.trace(col_cov)
        col_expect = col_cov * np.trace(row_cov)
        rel_row = np.linalg.norm(row_emp - row_expect) / np.linalg.norm(row_expect)
        rel_col = np.linalg.norm(col_emp - col_expect) / np.linalg.norm(col_expect)
        assert rel_row < 0.05
        assert rel_col < 0.05

    def test_scalar_variance_is_product(self):
        dist = matnorm.MatrixGaussian.from_covariances([[0.0]], [[2.0]], [[3.0]])
        stream = numerics.RngStream(3)
        draws = np.array(
            [matnorm.sample(dist, stream.child(i))[0, 0] for i in range(100_000)]
        )
        assert abs(draws.var() - 6.0) < 0.2

    def test_affine_closure(self):
        # G W H ~ MN(G M H, G Sigma G^T, H^T Omega H) for conformable G, H.
        rng = np.random.default_rng(7)
        dist = _random_dist(rng, 2, 3, mean_scale=0.0)
        g = rng.standard_normal((2, 2))
        h = rng.standard_normal((3, 2))
        stream = numerics.RngStream(13)
        draws = np.stack(
            [g @ matnorm.sample(dist, stream.child(i)) @ h for i in range(100_000)]
        )
        row_cov = dist.row_chol @ dist.row_chol.T
        col_cov = dist.col_chol @ dist.col_chol.T
        row_t = g @ row_cov @ g.T
        col_t = h.T @ col_cov @ h
        row_emp = np.einsum("kij,klj->il", draws, draws) / draws.shape[0]
        col_emp = np.einsum("kji,kjl->il", draws, draws) / draws.shape[0]
        assert (
            np.linalg.norm(row_emp - row_t * np.trace(col_t))
            / np.linalg.norm(row_t * np.trace(col_t))
            < 0.05
        )
        assert (
            np.linalg.norm(col_emp - col_t * np.trace(row_t))
            / np.linalg.norm(col_t * np.trace(row_t))
            < 0.05
        )

    def test_sampling_is_deterministic_per_seed(self):
        rng = np.random.default_rng(8)
        dist = _random_dist(rng, 3, 2)
        a = matnorm.sample(dist, numerics.RngStream(42))
        b = matnorm.sample(dist, numerics.RngStream(42))
        assert np.array_equal(a, b)


class TestKl:
    def test_identical_distributions_give_zero(self):
        rng = np.random.default_rng(9)
        dist = _random_dist(rng, 3, 2)
        assert abs(matnorm.kl_divergence(dist, dist)) < 1e-10

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(10)
        for _ in range(25):
            n, p = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            a = _random_dist(rng, n, p)
            b = _random_dist(rng, n, p)
            assert matnorm.kl_divergence(a, b) >= -1e-10

    def test_matches_dense_gaussian_kl(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            n, p = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            a = _random_dist(rng, n, p)
            b = _random_dist(rng, n, p)
            ca = np.kron(a.col_chol @ a.col_chol.T, a.row_chol @ a.row_chol.T)
            cb = np.kron(b.col_chol @ b.col_chol.T, b.row_chol @ b.row_chol.T)
            ma = a.mean.reshape(-1, order="F")
            mb = b.mean.reshape(-1, order="F")
            d = ma.size
            cb_inv = np.linalg.inv(cb)
            dense = 0.5 * (
                np.trace(cb_inv @ ca)
                + (mb - ma) @ cb_inv @ (mb - ma)
                - d
                + np.log(np.linalg.det(cb) / np.linalg.det(ca))
            )
            assert np.isclose(matnorm.kl_divergence(a, b), dense, atol=1e-7)

    def test_known_scalar_value(self):
        # KL(N(0, 2) || N(0, 1)) = 0.5 * (2 - 1 - log 2)
        a = matnorm.MatrixGaussian.from_covariances([[0.0]], [[2.0]], [[1.0]])
        b = matnorm.MatrixGaussian.from_covariances([[0.0]], [[1.0]], [[1.0]])
        assert np.isclose(
            matnorm.kl_divergence(a, b), 0.5 * (2 - 1 - np.log(2.0)), atol=1e-12
        )


class TestConditional:
    def test_interpolates_training_rows(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(-1, 1, size=(6, 2))
        w = rng.standard_normal((6, 3))
        kern = kernels.RbfKernel(np.zeros(2))
        post = matnorm.conditional(kern, x, w, np.eye(3), x[2:3])
        assert np.allclose(post.mean, w[2:3], atol=1e-4)
        row_var = (post.row_chol @ post.row_chol.T)[0, 0]
        assert row_var < 1e-5

    def test_far_query_reverts_to_prior(self):
        rng = np.random.default_rng(14)
        x = rng.uniform(-1, 1, size=(5, 1))
        w = rng.standard_normal((5, 2))
        kern = kernels.RbfKernel(np.zeros(1), np.log(1.7))
        post = matnorm.conditional(kern, x, w, np.eye(2), np.array([[60.0]]))
        assert np.allclose(post.mean, 0.0, atol=1e-8)
        row_var = (post.row_chol @ post.row_chol.T)[0, 0]
        assert np.isclose(row_var, 1.7, atol=1e-6)

    def test_row_count_mismatch_rejected(self):
        kern = kernels.RbfKernel(np.zeros(1))
        with pytest.raises(DimensionMismatch):
            matnorm.conditional(
                kern, np.zeros((3, 1)), np.zeros((2, 2)), np.eye(2), np.zeros((1, 1))
            )
