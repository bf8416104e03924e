"""Tests for the sinh-arcsinh distribution family."""

import numpy as np
import pytest
from scipy.stats import norm

from latmom.sas import (
    QuadratureError,
    SasParams,
    check_admissibility,
    event_prob_arrays,
    sas_cdf,
    sas_event_prob,
    sas_numeric_moments,
    sas_pdf,
    sas_quantile,
    sas_sample,
    sas_transform,
)

STD = SasParams(0.0, 1.0, 0.0, 1.0)


def random_params(rng, n):
    """Parameter draws spanning the ranges the models use."""
    return [
        SasParams(
            mu=rng.uniform(-4, 4),
            sigma=rng.uniform(0.2, 5.0),
            nu=rng.uniform(-2, 2),
            tau=rng.uniform(0.3, 3.0),
        )
        for _ in range(n)
    ]


class TestParams:
    def test_rejects_nonpositive_sigma_tau(self):
        with pytest.raises(ValueError):
            SasParams(0.0, 0.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            SasParams(0.0, 1.0, 0.0, -2.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SasParams(np.inf, 1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            SasParams(0.0, 1.0, np.nan, 1.0)


class TestTransform:
    def test_identity_at_center(self):
        assert sas_transform(0.0, STD) == 0.0

    def test_normal_reduction(self):
        assert sas_transform(1.5, STD) == pytest.approx(1.5, abs=1e-15)

    def test_high_precision_value(self):
        # oracle: 50-digit evaluation of mu + sigma*sinh((asinh(y)+nu)/tau)
        p = SasParams(1.0, 2.0, 0.5, 1.3)
        assert sas_transform(0.7, p) == pytest.approx(3.0149989570470116771, rel=1e-14)

    def test_strictly_increasing(self):
        rng = np.random.default_rng(1)
        for p in random_params(rng, 10):
            y = np.linspace(-6, 6, 101)
            assert np.all(np.diff(sas_transform(y, p)) > 0)


class TestCdf:
    def test_normal_reduction_value(self):
        assert sas_cdf(1.0, STD) == pytest.approx(norm.cdf(1.0), abs=1e-13)

    def test_symmetry_at_location(self):
        for sigma, tau in [(0.5, 1.0), (2.0, 0.7), (1.0, 2.4)]:
            p = SasParams(1.3, sigma, 0.0, tau)
            assert sas_cdf(1.3, p) == pytest.approx(0.5, abs=1e-14)

    def test_monte_carlo_value(self):
        # oracle: fraction of 1e7 transform draws below 0 -> 0.160 (3 dp)
        p = SasParams(0.5, 1.0, 0.3, 1.2)
        assert sas_cdf(0.0, p) == pytest.approx(0.160, abs=5e-4)

    def test_limits_and_monotone(self):
        rng = np.random.default_rng(2)
        for p in random_params(rng, 10):
            z = np.linspace(p.mu - 50 * p.sigma, p.mu + 50 * p.sigma, 201)
            f = sas_cdf(z, p)
            assert np.all(np.diff(f) >= 0)
            # heavy tails (tau < 1) need an enormous window to saturate
            assert sas_cdf(p.mu - 1e12 * p.sigma, p) < 1e-9
            assert sas_cdf(p.mu + 1e12 * p.sigma, p) > 1 - 1e-9

    def test_normal_reduction_sweep(self):
        # |F(z; mu,sigma,0,1) - Phi((z-mu)/sigma)| < 1e-12 everywhere
        z = np.linspace(-10, 10, 401)
        for mu, sigma in [(0.0, 1.0), (-2.0, 0.4), (1.5, 3.0)]:
            p = SasParams(mu, sigma, 0.0, 1.0)
            assert np.max(np.abs(sas_cdf(z, p) - norm.cdf((z - mu) / sigma))) < 1e-12

    def test_consistent_with_transform(self):
        # F(transform(y)) = Phi(y) to 1e-12
        rng = np.random.default_rng(3)
        y = np.linspace(-5, 5, 41)
        for p in random_params(rng, 10):
            assert np.max(np.abs(sas_cdf(sas_transform(y, p), p) - norm.cdf(y))) < 1e-12


class TestPdf:
    def test_normal_reduction(self):
        assert sas_pdf(0.0, STD) == pytest.approx(norm.pdf(0.0), abs=1e-14)

    def test_integrates_to_one(self):
        from scipy.integrate import quad

        p = SasParams(1.0, 2.0, 0.5, 1.3)
        val, _ = quad(lambda z: sas_pdf(z, p), -40, 40, limit=200)
        assert val == pytest.approx(1.0, abs=1e-8)

    def test_matches_cdf_derivative(self):
        # central differences of the CDF as the independent oracle
        p = SasParams(0.5, 1.0, 0.3, 1.2)
        z, h = 0.37, 1e-5
        fd = (sas_cdf(z + h, p) - sas_cdf(z - h, p)) / (2 * h)
        assert sas_pdf(z, p) == pytest.approx(fd, rel=1e-6)

    def test_matches_cdf_derivative_sweep(self):
        rng = np.random.default_rng(4)
        h = 1e-5
        for p in random_params(rng, 20):
            z = p.mu + p.sigma * rng.uniform(-2, 2)
            fd = (sas_cdf(z + h, p) - sas_cdf(z - h, p)) / (2 * h)
            assert sas_pdf(z, p) == pytest.approx(fd, rel=1e-6)


class TestQuantile:
    def test_median_is_location_under_symmetry(self):
        assert sas_quantile(0.5, SasParams(3.0, 2.0, 0.0, 1.0)) == pytest.approx(3.0)

    def test_normal_reduction(self):
        assert sas_quantile(0.975, STD) == pytest.approx(1.95996, abs=1e-5)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            sas_quantile(0.0, STD)
        with pytest.raises(ValueError):
            sas_quantile(1.2, STD)

    def test_roundtrip_through_cdf(self):
        p = SasParams(0.5, 1.5, -0.4, 0.8)
        for z in [-3.0, -1.0, 0.0, 1.0, 3.0]:
            assert sas_quantile(sas_cdf(z, p), p) == pytest.approx(z, abs=1e-10)

    def test_roundtrip_sweep(self):
        # F(Q(q)) = q to 1e-10 across q in [1e-6, 1-1e-6]
        rng = np.random.default_rng(5)
        q = np.concatenate([[1e-6, 1 - 1e-6], np.linspace(0.001, 0.999, 41)])
        for p in random_params(rng, 10):
            assert np.max(np.abs(sas_cdf(sas_quantile(q, p), p) - q)) < 1e-10


class TestEventProb:
    def test_half_at_symmetric_center(self):
        for sigma, tau in [(0.3, 1.0), (1.0, 2.0), (4.0, 0.5)]:
            assert sas_event_prob(SasParams(0.0, sigma, 0.0, tau)) == pytest.approx(0.5)

    def test_normal_reduction(self):
        assert sas_event_prob(SasParams(1.0, 1.0, 0.0, 1.0)) == pytest.approx(
            norm.cdf(1.0), abs=1e-13
        )

    def test_monte_carlo_value(self):
        # oracle: 1e7 transform draws, fraction > 0 = 0.59362 (SE 1.6e-4)
        p = SasParams(-0.5, 1.2, 0.6, 0.9)
        assert sas_event_prob(p) == pytest.approx(0.59362, abs=6.5e-4)

    def test_equals_one_minus_cdf_at_zero(self):
        rng = np.random.default_rng(6)
        for p in random_params(rng, 20):
            assert sas_event_prob(p) == pytest.approx(1.0 - sas_cdf(0.0, p), abs=1e-12)

    @staticmethod
    def _assert_increasing(probs):
        # strictly increasing until the probability saturates in doubles
        probs = np.asarray(probs)
        inside = (probs[:-1] > 1e-13) & (probs[1:] < 1 - 1e-13)
        d = np.diff(probs)
        assert np.all(d >= 0)
        assert np.all(d[inside] > 0)
        assert inside.any()

    def test_monotone_in_mu_and_nu(self):
        for nu, tau in [(0.0, 1.0), (-1.0, 0.6), (0.8, 2.0)]:
            self._assert_increasing(
                [sas_event_prob(SasParams(m, 1.3, nu, tau)) for m in np.linspace(-3, 3, 10)]
            )
        for mu, tau in [(0.0, 1.0), (-0.7, 1.5), (1.2, 0.5)]:
            self._assert_increasing(
                [sas_event_prob(SasParams(mu, 1.3, n, tau)) for n in np.linspace(-2, 2, 10)]
            )

    def test_array_form_matches_scalar(self):
        rng = np.random.default_rng(7)
        ps = random_params(rng, 50)
        mu = np.array([p.mu for p in ps])
        sg = np.array([p.sigma for p in ps])
        nu = np.array([p.nu for p in ps])
        ta = np.array([p.tau for p in ps])
        vec = event_prob_arrays(mu, sg, nu, ta)
        ref = np.array([sas_event_prob(p) for p in ps])
        np.testing.assert_allclose(vec, ref, atol=1e-15)


class TestSample:
    def test_reproducible(self):
        p = SasParams(0.5, 1.0, 0.3, 1.2)
        np.testing.assert_array_equal(sas_sample(100, p, 42), sas_sample(100, p, 42))

    def test_mean_of_standard(self):
        draws = sas_sample(1_000_000, STD, 11)
        assert abs(draws.mean()) < 0.005

    def test_empirical_cdf_close(self):
        # Kolmogorov-style sup distance between empirical and exact CDF
        p = SasParams(0.5, 1.5, -0.4, 0.8)
        draws = np.sort(sas_sample(1_000_000, p, 12))
        grid = np.arange(1, draws.size + 1) / draws.size
        sup = np.max(np.abs(sas_cdf(draws, p) - grid))
        assert sup < 0.002

    def test_exceedance_matches_event_prob(self):
        p = SasParams(0.5, 1.0, 0.3, 1.2)
        draws = sas_sample(1_000_000, p, 13)
        assert np.mean(draws > 0) == pytest.approx(sas_event_prob(p), abs=1e-3)

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError):
            sas_sample(0, STD, 1)


class TestMoments:
    def test_standard_normal(self):
        mean, var, skew, kurt = sas_numeric_moments(STD)
        assert mean == pytest.approx(0.0, abs=1e-9)
        assert var == pytest.approx(1.0, abs=1e-8)
        assert skew == pytest.approx(0.0, abs=1e-8)
        assert kurt == pytest.approx(3.0, abs=1e-7)

    def test_location_scale_normal(self):
        mean, var, skew, kurt = sas_numeric_moments(SasParams(2.0, 3.0, 0.0, 1.0))
        assert mean == pytest.approx(2.0, abs=1e-8)
        assert var == pytest.approx(9.0, abs=1e-7)
        assert skew == pytest.approx(0.0, abs=1e-8)
        assert kurt == pytest.approx(3.0, abs=1e-7)

    def test_skewed_case_against_monte_carlo(self):
        # oracle: 1e7-draw MC -> mean 1.06, var 3.15, skew 1.21, kurt 5.11
        mean, var, skew, kurt = sas_numeric_moments(SasParams(0.0, 1.0, 0.5, 0.8))
        assert mean == pytest.approx(1.06, abs=5e-3)
        assert var == pytest.approx(3.15, abs=1e-2)
        assert skew == pytest.approx(1.21, abs=1e-2)
        assert kurt == pytest.approx(5.11, abs=6e-2)
        assert kurt > skew**2 + 1


class TestAdmissibility:
    def test_standard_normal(self):
        assert check_admissibility(STD)

    def test_extreme_but_valid(self):
        assert check_admissibility(SasParams(5.0, 0.1, -1.5, 2.5))

    @pytest.mark.slow
    def test_random_sweep(self):
        # the family satisfies kurtosis > skewness^2 + 1 by construction
        rng = np.random.default_rng(8)
        for p in random_params(rng, 200):
            assert check_admissibility(p), p


def test_quadrature_error_is_runtime_error():
    assert issubclass(QuadratureError, RuntimeError)
