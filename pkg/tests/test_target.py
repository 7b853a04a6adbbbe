import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.stats import multivariate_normal, norm

from pfode.exceptions import InputError
from pfode.schedule import VarianceSchedule
from pfode.target import (
    GaussianMixture,
    ScoreField,
    delta,
    forward_density,
    log_forward_density,
    marginal_density_first_dim,
    moments,
    perturbed_score,
    random_mixture,
    responsibilities,
    sample_mixture,
    true_score,
)

OU = VarianceSchedule.constant_ou(16.0)
LIN = VarianceSchedule.linear(1e-4, 0.02, 2000.0)

TWO_MODE = GaussianMixture([0.5, 0.5], [-2.0, 2.0], [0.25, 0.25])


def three_mode_2d():
    return GaussianMixture(
        [0.2, 0.5, 0.3],
        [[-2.0, 1.0], [0.5, -0.5], [2.5, 2.0]],
        [
            [[0.5, 0.1], [0.1, 0.3]],
            [[0.2, -0.05], [-0.05, 0.4]],
            [[1.0, 0.3], [0.3, 0.6]],
        ],
    )


def three_mode_3d():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3, 3))
    covs = A @ np.swapaxes(A, 1, 2) / 3 + 0.4 * np.eye(3)
    return GaussianMixture([0.3, 0.3, 0.4], rng.uniform(-2, 2, (3, 3)), covs)


def unit_gaussian(d):
    return GaussianMixture([1.0], np.zeros((1, d)), np.eye(d)[None])


class TestMixtureValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            GaussianMixture([0.5, 0.4], [0.0, 1.0], [1.0, 1.0])

    def test_nonpositive_weight(self):
        with pytest.raises(ValueError):
            GaussianMixture([1.5, -0.5], [0.0, 1.0], [1.0, 1.0])

    def test_not_positive_definite(self):
        with pytest.raises(ValueError):
            GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]])

    def test_asymmetric(self):
        with pytest.raises(ValueError):
            GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 0.1], [0.0, 1.0]]])

    def test_roundtrip_dict(self):
        mix = three_mode_2d()
        again = GaussianMixture.from_dict(mix.to_dict())
        np.testing.assert_array_equal(again.covs, mix.covs)

    def test_random_mixture_is_seeded_and_valid(self):
        a, b = random_mixture(8, 5, seed=11), random_mixture(8, 5, seed=11)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.covs, b.covs)
        assert a.dim == 8 and a.n_components == 5
        assert np.all(np.abs(a.means) <= 3)
        assert np.linalg.eigvalsh(a.covs).min() >= 0.5 - 1e-12


class TestForwardDensity:
    def test_two_mode_at_origin(self):
        expected = 0.5 * (norm.pdf(0, -2, 0.5) + norm.pdf(0, 2, 0.5))
        assert forward_density(TWO_MODE, OU, 0.0, [0.0]) == pytest.approx(expected, rel=1e-13)

    @pytest.mark.parametrize("t", [0.0, 0.3, 2.0])
    def test_integrates_to_one(self, t):
        y = np.linspace(-10, 10, 100_000)
        q = forward_density(TWO_MODE, OU, t, y[:, None])
        assert trapezoid(q, y) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("t", [0.0, 0.7, 5.0])
    def test_unit_gaussian_is_stationary(self, t):
        y = np.array([[0.3, -1.2], [2.0, 0.5]])
        expected = multivariate_normal(np.zeros(2), np.eye(2)).pdf(y)
        np.testing.assert_allclose(forward_density(unit_gaussian(2), OU, t, y), expected, rtol=1e-12)

    def test_matches_direct_pdf_2d(self):
        mix = three_mode_2d()
        t = 0.4
        lam, sig = OU.lam(t), OU.sigma(t)
        y = np.array([[0.1, 0.2], [-1.5, 1.0], [3.0, 2.5]])
        expected = sum(
            w * multivariate_normal(lam * m, lam**2 * C + sig**2 * np.eye(2)).pdf(y)
            for w, m, C in zip(mix.weights, mix.means, mix.covs)
        )
        np.testing.assert_allclose(forward_density(mix, OU, t, y), expected, rtol=1e-12)

    def test_strictly_positive_far_away(self):
        assert log_forward_density(TWO_MODE, OU, 0.0, [200.0]) > -np.inf


class TestScore:
    @pytest.mark.parametrize("t_rev", [0.0, 5.0, 15.9, 16.0])
    def test_unit_gaussian_score_is_minus_x(self, t_rev):
        x = np.array([[0.3, -1.2, 4.0], [2.0, 0.5, -3.0]])
        np.testing.assert_allclose(true_score(unit_gaussian(3), OU, t_rev, x), -x, rtol=1e-13)

    def test_symmetric_point(self):
        for t_rev in (0.0, 8.0, 16.0):
            assert abs(true_score(TWO_MODE, OU, t_rev, [0.0])[0]) < 1e-15

    @pytest.mark.parametrize("mix_fn,sched", [(three_mode_2d, OU), (three_mode_2d, LIN),
                                              (three_mode_3d, OU)])
    def test_matches_finite_difference(self, mix_fn, sched):
        mix = mix_fn()
        rng = np.random.default_rng(0)
        h = 1e-5
        for _ in range(20):
            t_rev = rng.uniform(0, sched.T)
            x = rng.uniform(-3, 3, mix.dim)
            t = sched.T - t_rev
            fd = np.array([
                (log_forward_density(mix, sched, t, x + h * e)
                 - log_forward_density(mix, sched, t, x - h * e)) / (2 * h)
                for e in np.eye(mix.dim)
            ])
            s = true_score(mix, sched, t_rev, x)
            tol = max(1e-5, 1e-4 * np.linalg.norm(s))
            assert np.max(np.abs(s - fd)) <= tol

    def test_non_finite_input(self):
        with pytest.raises(InputError):
            true_score(TWO_MODE, OU, 1.0, [np.nan])

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            true_score(three_mode_2d(), OU, 1.0, np.zeros((4, 3)))

    @pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
    def test_responsibilities_stable(self, scale):
        mix = three_mode_2d()
        rng = np.random.default_rng(1)
        x = rng.standard_normal((50, 2))
        x = scale * x / np.linalg.norm(x, axis=1, keepdims=True)
        r = responsibilities(mix, OU, 0.0, x)
        assert np.all(np.isfinite(r))
        np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.isfinite(true_score(mix, OU, 16.0, x)))


class TestDelta:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (1.5, 0.875), (2.0, 1.0),
                                            (-0.5, -0.125), (3.25, 1.0 + 1 - 0.75**2 / 2)])
    def test_values(self, x, expected):
        assert delta(x) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("c", range(-5, 6))
    def test_continuity_and_c1(self, c):
        h = 1e-6
        # continuity: |delta'| <= 1 everywhere
        assert abs(delta(c + h) - delta(c - h)) <= 2 * h * 1.0 + 1e-15
        right = (delta(c + h) - delta(c)) / h
        left = (delta(c) - delta(c - h)) / h
        assert abs(right - left) <= 4 * h + 1e-8

    @pytest.mark.parametrize("cell", range(-5, 5))
    def test_second_derivative_sign(self, cell):
        x, h = cell + 0.5, 1e-3
        second = (delta(x + h) - 2 * delta(x) + delta(x - h)) / h**2
        assert second == pytest.approx(1.0 if cell % 2 == 0 else -1.0, abs=1e-4)

    @given(st.floats(-50, 50))
    def test_tracks_half_x(self, x):
        # the ramp stays within 1/2 of x/2
        assert abs(delta(x) - x / 2) <= 0.5 + 1e-12


class TestPerturbedScore:
    def test_zero_eps_is_bitwise_true_score(self):
        mix = three_mode_2d()
        field = ScoreField(mix, OU, 0.0)
        x = np.random.default_rng(5).standard_normal((10, 2))
        np.testing.assert_array_equal(perturbed_score(field, 3.0, x), true_score(mix, OU, 3.0, x))

    def test_known_offset(self):
        mix = unit_gaussian(4)
        field = ScoreField(mix, OU, 0.1)
        x = np.array([0.5, 1.0, -2.0, 3.0])
        diff = perturbed_score(field, 2.0, x) - true_score(mix, OU, 2.0, x)
        np.testing.assert_allclose(diff, 0.00625, rtol=1e-13)

    def test_depends_on_first_coordinate_only(self):
        field = ScoreField(unit_gaussian(4), OU, 0.3)
        rng = np.random.default_rng(6)
        base = field.perturbation(np.array([0.7, 0.0, 0.0, 0.0]))
        for _ in range(5):
            x = np.concatenate([[0.7], rng.standard_normal(3) * 10])
            np.testing.assert_array_equal(field.perturbation(x), base)

    def test_negative_eps_rejected(self):
        with pytest.raises(ValueError):
            ScoreField(TWO_MODE, OU, -1.0)


class TestMoments:
    def test_single_gaussian_t0(self):
        m, C = np.array([1.0, -2.0]), np.array([[0.5, 0.2], [0.2, 0.9]])
        mean, cov = moments(GaussianMixture([1.0], [m], [C]), OU, 0.0)
        np.testing.assert_allclose(mean, m, rtol=1e-15)
        np.testing.assert_allclose(cov, C, rtol=1e-14)

    @pytest.mark.parametrize("sched,t", [(OU, 0.3), (LIN, 700.0)])
    def test_single_gaussian_pushforward(self, sched, t):
        m, C = np.array([1.0, -2.0]), np.array([[0.5, 0.2], [0.2, 0.9]])
        mean, cov = moments(GaussianMixture([1.0], [m], [C]), sched, t)
        lam, sig = sched.lam(t), sched.sigma(t)
        np.testing.assert_allclose(mean, lam * m, rtol=1e-14)
        np.testing.assert_allclose(cov, lam**2 * C + sig**2 * np.eye(2), rtol=1e-13)

    def test_two_mode_total_variance(self):
        mean, cov = moments(TWO_MODE, OU, 0.0)
        assert mean[0] == pytest.approx(0.0, abs=1e-16)
        assert cov[0, 0] == pytest.approx(4.25, rel=1e-15)

    @pytest.mark.parametrize("t", [0.0, 0.2, 1.5])
    def test_quadrature_1d(self, t):
        mix = GaussianMixture([0.3, 0.4, 0.3], [-2.0, 0.5, 3.0], [0.25, 0.5, 0.3])
        y = np.linspace(-15, 15, 200_001)
        q = forward_density(mix, OU, t, y[:, None])
        mean, cov = moments(mix, OU, t)
        m1 = trapezoid(y * q, y)
        m2 = trapezoid(y * y * q, y)
        assert m1 == pytest.approx(mean[0], abs=1e-6)
        assert m2 - m1**2 == pytest.approx(cov[0, 0], abs=1e-6)

    def test_cov_psd(self):
        mix = random_mixture(6, 5, seed=2)
        _, cov = moments(mix, OU, 0.1)
        assert np.linalg.eigvalsh(cov).min() > 0


class TestMarginal:
    def test_1d_equals_forward_density(self):
        y = np.linspace(-4, 4, 17)
        np.testing.assert_allclose(
            marginal_density_first_dim(TWO_MODE, OU, 0.3, y),
            forward_density(TWO_MODE, OU, 0.3, y[:, None]),
            rtol=1e-13,
        )

    @pytest.mark.parametrize("t", [0.0, 1.0, 9.0])
    def test_unit_gaussian(self, t):
        y = np.linspace(-3, 3, 7)
        np.testing.assert_allclose(marginal_density_first_dim(unit_gaussian(2), OU, t, y),
                                   norm.pdf(y), rtol=1e-13)

    def test_3d_against_quadrature(self):
        mix = three_mode_3d()
        t = 0.2
        g = np.linspace(-9, 9, 241)
        Y2, Y3 = np.meshgrid(g, g, indexing="ij")
        for y1 in (-1.0, 0.3, 1.7):
            pts = np.stack([np.full(Y2.size, y1), Y2.ravel(), Y3.ravel()], axis=1)
            q = forward_density(mix, OU, t, pts).reshape(Y2.shape)
            val = trapezoid(trapezoid(q, g, axis=1), g)
            assert val == pytest.approx(marginal_density_first_dim(mix, OU, t, y1), abs=1e-4)


class TestSampling:
    def test_clt_mean(self):
        n = 100_000
        x = sample_mixture(unit_gaussian(2), 0, n)
        assert np.all(np.abs(x.mean(axis=0)) < 4 / math.sqrt(n))

    def test_single_component(self):
        mix = GaussianMixture([1.0], [[5.0, -5.0]], [np.eye(2) * 1e-4])
        x = sample_mixture(mix, 1, 1000)
        assert np.all(np.abs(x - [5.0, -5.0]) < 0.1)

    def test_deterministic(self):
        mix = three_mode_2d()
        np.testing.assert_array_equal(sample_mixture(mix, 42, 500), sample_mixture(mix, 42, 500))

    def test_moments_match(self):
        mix = three_mode_2d()
        n = 200_000
        x = sample_mixture(mix, 3, n)
        mean, cov = moments(mix, OU, 0.0)
        se = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(x.mean(axis=0) - mean) < 4 * se)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_shape(self, seed):
        assert sample_mixture(three_mode_3d(), seed, 3).shape == (3, 3)
