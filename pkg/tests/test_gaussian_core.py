import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uae import autodiff as ad
from uae.errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidKappa,
    InvalidSelection,
    NonPositiveDefinite,
)
from uae.gaussian_core import (
    GaussianPosterior,
    Heuristic,
    PosteriorKind,
    SigmaSelection,
    build_full_scale,
    cholesky,
    full_scale_tensor,
    largest_eigenvalue,
    largest_eigenvalue_tensor,
    select_sigmas,
    sigma_point_tensor,
    sigma_points,
    unscented_moments,
)
from helpers import random_lower


def _posterior(rng, n):
    return GaussianPosterior.full(rng.uniform(-2, 2, n), random_lower(rng, n))


class TestCholesky:
    def test_identity(self, backend):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_scalar(self, backend):
        np.testing.assert_allclose(cholesky([[4.0]]), [[2.0]])

    def test_two_by_two(self, backend):
        np.testing.assert_allclose(cholesky([[4.0, 2.0], [2.0, 5.0]]), [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)

    def test_round_trip(self, backend, rng):
        for n in (1, 2, 5, 9):
            L = random_lower(rng, n)
            np.testing.assert_allclose(cholesky(L @ L.T), L, atol=1e-9)

    def test_reconstructs_input(self, backend, rng):
        L = random_lower(rng, 6)
        a = L @ L.T
        out = cholesky(a)
        np.testing.assert_allclose(out @ out.T, a, atol=1e-10)

    def test_indefinite_raises(self, backend):
        with pytest.raises(NonPositiveDefinite):
            cholesky([[1.0, 2.0], [2.0, 1.0]])

    def test_pivot_floor(self, backend):
        with pytest.raises(NonPositiveDefinite):
            cholesky([[1e-13]])

    def test_non_square(self):
        with pytest.raises(DimensionMismatch):
            cholesky(np.ones((2, 3)))


class TestBuildFullScale:
    def test_zero_correlations(self):
        np.testing.assert_array_equal(build_full_scale([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]), np.eye(3))

    def test_three_dim_layout(self):
        s = np.array([1.5, 0.7, 2.0])
        raw = np.array([0.3, -0.8, 1.1])
        r = np.tanh(raw)
        expected = np.array([[s[0], 0, 0],
                             [r[0] * s[1] * s[0], s[1], 0],
                             [r[1] * s[2] * s[0], r[2] * s[2] * s[1], s[2]]])
        np.testing.assert_allclose(build_full_scale(s, raw), expected, rtol=1e-15)

    def test_two_dim_example(self):
        L = build_full_scale([2.0, 3.0], [np.arctanh(0.5)])
        np.testing.assert_allclose(L, [[2.0, 0.0], [3.0, 3.0]], rtol=1e-14)
        assert np.all(np.linalg.eigvalsh(L @ L.T) > 0)

    def test_wrong_count(self):
        with pytest.raises(DimensionMismatch):
            build_full_scale([1.0, 1.0, 1.0], [0.0, 0.0])

    @given(st.integers(1, 6), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_always_valid_posterior(self, n, seed):
        rng = np.random.default_rng(seed)
        sig = rng.uniform(0.01, 5.0, n)
        raw = rng.normal(0, 10, n * (n - 1) // 2)
        L = build_full_scale(sig, raw)
        GaussianPosterior.full(np.zeros(n), L)
        np.testing.assert_array_equal(np.diagonal(L), sig)
        assert np.all(np.abs(np.tril(L, -1)) <= np.outer(sig, sig) + 1e-15)

    def test_tensor_matches_and_batches(self, rng):
        sig = rng.uniform(0.5, 2, (4, 3))
        raw = rng.normal(size=(4, 3))
        out = full_scale_tensor(ad.Node(sig), ad.Node(raw)).value
        for b in range(4):
            np.testing.assert_allclose(out[b], build_full_scale(sig[b], raw[b]), rtol=1e-15)


class TestGaussianPosterior:
    def test_rejects_upper_entries(self):
        with pytest.raises(ValueError):
            GaussianPosterior.full(np.zeros(2), np.array([[1.0, 0.1], [0.0, 1.0]]))

    def test_rejects_nonpositive_diagonal(self):
        with pytest.raises(ValueError):
            GaussianPosterior.diagonal(np.zeros(2), np.array([1.0, 0.0]))

    def test_diagonal_rejects_off_diagonal(self):
        with pytest.raises(ValueError):
            GaussianPosterior(np.zeros(2), np.array([[1.0, 0.0], [0.5, 1.0]]), PosteriorKind.DIAGONAL)

    def test_covariance(self):
        p = GaussianPosterior.diagonal(np.zeros(2), np.array([2.0, 3.0]))
        np.testing.assert_array_equal(p.covariance, np.diag([4.0, 9.0]))


class TestSigmaPoints:
    def test_unit_scalar(self):
        s = sigma_points(GaussianPosterior.diagonal([0.0], [1.0]), kappa=0.0)
        np.testing.assert_array_equal(s.points.ravel(), [0.0, 1.0, -1.0])

    def test_scaled_scalar(self):
        s = sigma_points(GaussianPosterior.diagonal([2.0], [2.0]), kappa=1.0)
        np.testing.assert_allclose(s.points.ravel(), [2.0, 2.0 + math.sqrt(8.0), 2.0 - math.sqrt(8.0)], rtol=1e-15)

    def test_mean_point_exact(self, rng):
        p = _posterior(rng, 4)
        s = sigma_points(p)
        np.testing.assert_array_equal(s.points[0], p.mean)
        assert s.points.shape == (9, 4)

    def test_pair_symmetry(self, rng):
        # exact in real arithmetic; floating point leaves a few ulps
        for n in (1, 3, 8):
            p = _posterior(rng, n)
            pts = sigma_points(p).points
            offsets = np.abs(pts[1:n + 1] - p.mean)
            bound = 4 * np.finfo(float).eps * (np.abs(p.mean) + offsets)
            assert np.all(np.abs(pts[1:n + 1] + pts[n + 1:] - 2 * p.mean) <= bound)

    @pytest.mark.parametrize("n", [1, 2, 4, 8, 16])
    def test_moment_reproduction(self, rng, n):
        for _ in range(20):
            p = _posterior(rng, n)
            m = unscented_moments(sigma_points(p, 0.5).points)
            np.testing.assert_allclose(m.mean, p.mean, atol=1e-12)
            np.testing.assert_allclose(m.covariance, p.covariance, atol=1e-10)

    def test_invalid_kappa(self):
        with pytest.raises(InvalidKappa):
            sigma_points(GaussianPosterior.diagonal([0.0, 0.0], [1.0, 1.0]), kappa=-2.0)

    def test_tensor_batches_match(self, rng):
        mus = rng.normal(size=(3, 2))
        Ls = np.array([random_lower(rng, 2) for _ in range(3)])
        pts = sigma_point_tensor(ad.Node(mus), ad.Node(Ls), 0.5).value
        for b in range(3):
            ref = sigma_points(GaussianPosterior.full(mus[b], Ls[b]), 0.5).points
            np.testing.assert_array_equal(pts[b], ref)


class TestUnscentedMoments:
    def test_square_of_standard_normal(self):
        s = sigma_points(GaussianPosterior.diagonal([0.0], [1.0]), kappa=0.0)
        m = unscented_moments(s.points ** 2)
        np.testing.assert_allclose(m.mean, [2.0 / 3.0], rtol=1e-15)

    def test_constant_outputs(self):
        m = unscented_moments(np.tile([1.5, -2.0], (5, 1)))
        np.testing.assert_array_equal(m.mean, [1.5, -2.0])
        np.testing.assert_array_equal(m.covariance, np.zeros((2, 2)))

    def test_linear_exactness(self, rng):
        for n, d in ((1, 1), (3, 2), (6, 4)):
            p = _posterior(rng, n)
            F = rng.normal(size=(d, n))
            b = rng.normal(size=d)
            m = unscented_moments(sigma_points(p, 0.5).points @ F.T + b)
            np.testing.assert_allclose(m.mean, F @ p.mean + b, atol=1e-9)
            np.testing.assert_allclose(m.covariance, F @ p.covariance @ F.T, atol=1e-9)

    def test_covariance_symmetric_psd(self, rng):
        pts = np.tanh(sigma_points(_posterior(rng, 5)).points @ rng.normal(size=(5, 3)))
        cov = unscented_moments(pts).covariance
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > -1e-9

    def test_empty(self):
        with pytest.raises(EmptyInput):
            unscented_moments(np.zeros((0, 2)))


class TestSelectSigmas:
    def test_all_in_order(self, rng):
        s = sigma_points(_posterior(rng, 2))
        out = select_sigmas(s, SigmaSelection(Heuristic.ALL, 5), 0)
        np.testing.assert_array_equal(np.array(out), s.points)

    def test_largest_pairs_diagonal(self):
        s = sigma_points(GaussianPosterior.diagonal([0.0, 0.0], [1.0, 3.0]))
        out = select_sigmas(s, SigmaSelection(Heuristic.LARGEST_EIGENVALUE_PAIRS, 2), 0)
        np.testing.assert_array_equal(np.array(out), s.points[[2, 4]])

    def test_largest_pairs_full_uses_column_norms(self):
        L = np.array([[1.0, 0.0], [2.0, 0.5]])  # column 0 norm^2 = 5, column 1 = 0.25
        s = sigma_points(GaussianPosterior.full([0.0, 0.0], L))
        out = select_sigmas(s, SigmaSelection(Heuristic.LARGEST_EIGENVALUE_PAIRS, 2), 0)
        np.testing.assert_array_equal(np.array(out), s.points[[1, 3]])

    def test_random_pairs_symmetric_and_repeatable(self, rng):
        p = _posterior(rng, 4)
        s = sigma_points(p)
        a = select_sigmas(s, SigmaSelection(Heuristic.RANDOM_PAIRS, 2), 7)
        b = select_sigmas(s, SigmaSelection(Heuristic.RANDOM_PAIRS, 2), 7)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a[0] + a[1], 2 * p.mean, atol=1e-12)

    def test_random_points_distinct(self, rng):
        s = sigma_points(_posterior(rng, 3))
        for seed in range(20):
            out = np.array(select_sigmas(s, SigmaSelection(Heuristic.RANDOM_POINTS, 7), seed))
            assert len({row.tobytes() for row in out}) == 7

    def test_random_points_uniform(self):
        s = sigma_points(GaussianPosterior.diagonal([0.0], [1.0]), kappa=0.0)
        counts = np.zeros(3)
        for seed in range(3000):
            (pt,) = select_sigmas(s, SigmaSelection(Heuristic.RANDOM_POINTS, 1), seed)
            counts[int(round(pt[0])) % 3] += 1
        np.testing.assert_allclose(counts / 3000, 1 / 3, atol=0.03)

    @pytest.mark.parametrize("selection", [
        SigmaSelection(Heuristic.RANDOM_POINTS, 6),
        SigmaSelection(Heuristic.RANDOM_PAIRS, 3),
        SigmaSelection(Heuristic.RANDOM_PAIRS, 6),
        SigmaSelection(Heuristic.LARGEST_EIGENVALUE_PAIRS, 0),
    ])
    def test_invalid_counts(self, selection):
        s = sigma_points(GaussianPosterior.diagonal([0.0, 0.0], [1.0, 1.0]))
        with pytest.raises(InvalidSelection):
            select_sigmas(s, selection, 0)


class TestLargestEigenvalue:
    def test_diagonal(self):
        p = GaussianPosterior.diagonal(np.zeros(3), np.sqrt([1.0, 4.0, 2.0]))
        assert largest_eigenvalue(p) == pytest.approx(4.0, rel=1e-15)

    def test_full_two_by_two(self, backend):
        p = GaussianPosterior.full(np.zeros(2), cholesky([[2.0, 1.0], [1.0, 2.0]]))
        assert largest_eigenvalue(p) == pytest.approx(3.0, rel=1e-8)

    def test_identity(self, backend):
        assert largest_eigenvalue(GaussianPosterior.full(np.zeros(4), np.eye(4))) == pytest.approx(1.0, rel=1e-12)

    def test_full_matches_dense_solver(self, backend, rng):
        for n in range(1, 9):
            p = _posterior(rng, n)
            ref = np.linalg.eigvalsh(p.covariance)[-1]
            assert largest_eigenvalue(p) == pytest.approx(ref, rel=1e-6)

    def test_tensor_gradient_matches_eigenvector_formula(self, rng):
        # d lambda / d L = 2 v v^T L for a simple top eigenvalue
        L0 = random_lower(rng, 3)
        node = ad.Node(L0)
        lam = largest_eigenvalue_tensor(node, PosteriorKind.FULL)
        (g,) = ad.grad_of(lam, [node])
        w, V = np.linalg.eigh(L0 @ L0.T)
        v = V[:, -1]
        np.testing.assert_allclose(lam.value, w[-1], rtol=1e-6)
        np.testing.assert_allclose(g, 2 * np.outer(v, v) @ L0, atol=1e-6)
