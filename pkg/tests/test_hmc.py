"""Tests for the HMC sampler and chain diagnostics."""

import numpy as np
import pytest

from latmom.hmc import (
    SamplerConfig,
    SamplerError,
    diagnostics,
    effective_sample_size,
    hmc_sample,
    split_rhat,
)


def std_normal_2d(x):
    return -0.5 * float(x @ x), -x


def correlated_gaussian(cov):
    prec = np.linalg.inv(cov)

    def logp_grad(x):
        g = -prec @ x
        return 0.5 * float(x @ g), g

    return logp_grad


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(chains=0)
        with pytest.raises(ValueError):
            SamplerConfig(iterations=100, warmup=100)
        with pytest.raises(ValueError):
            SamplerConfig(target_accept=1.5)


class TestSampler:
    def test_standard_normal_recovery(self):
        cfg = SamplerConfig(chains=4, iterations=2000, warmup=1000, seed=7)
        res = hmc_sample(std_normal_2d, 2, cfg)
        pooled = res.draws.reshape(-1, 2)
        assert pooled.shape[0] == 4000
        assert np.abs(pooled.mean(axis=0)).max() < 0.05
        assert np.abs(np.cov(pooled.T) - np.eye(2)).max() < 0.1
        assert split_rhat(res.draws).max() < 1.05

    def test_correlated_target(self):
        cov = np.array([[1.0, 0.7], [0.7, 2.0]])
        cfg = SamplerConfig(chains=4, iterations=3000, warmup=1500, seed=21)
        res = hmc_sample(correlated_gaussian(cov), 2, cfg)
        pooled = res.draws.reshape(-1, 2)
        assert np.abs(np.cov(pooled.T) - cov).max() < 0.15

    def test_seed_for_seed_reproducibility(self):
        cfg = SamplerConfig(chains=2, iterations=400, warmup=200, seed=5)
        a = hmc_sample(std_normal_2d, 2, cfg)
        b = hmc_sample(std_normal_2d, 2, cfg)
        np.testing.assert_array_equal(a.draws, b.draws)
        np.testing.assert_array_equal(a.logp, b.logp)

    def test_different_seeds_differ(self):
        cfg_a = SamplerConfig(chains=1, iterations=300, warmup=150, seed=1)
        cfg_b = SamplerConfig(chains=1, iterations=300, warmup=150, seed=2)
        a = hmc_sample(std_normal_2d, 2, cfg_a)
        b = hmc_sample(std_normal_2d, 2, cfg_b)
        assert not np.array_equal(a.draws, b.draws)

    def test_draw_count_contract(self):
        cfg = SamplerConfig(chains=3, iterations=250, warmup=100, seed=3)
        res = hmc_sample(std_normal_2d, 2, cfg)
        assert res.draws.shape == (3, 150, 2)
        assert np.isfinite(res.draws).all()

    def test_divergence_failure_reported(self):
        # gradient cliff at x=1 blows up trajectories tuned to the flat region
        def cliff(x):
            v = -0.5 * float(x @ x)
            g = -x.copy()
            if x[0] > 1.0:
                v -= 5e7 * (x[0] - 1.0) ** 2
                g[0] -= 1e8 * (x[0] - 1.0)
            return v, g

        cfg = SamplerConfig(chains=1, iterations=220, warmup=20, seed=11)
        with pytest.raises(SamplerError, match="diverged"):
            hmc_sample(cliff, 2, cfg)

    def test_explicit_start_point(self):
        cfg = SamplerConfig(chains=2, iterations=300, warmup=150, seed=9)
        res = hmc_sample(std_normal_2d, 2, cfg, x0=np.array([10.0, -10.0]))
        pooled = res.draws.reshape(-1, 2)
        assert np.abs(pooled[-100:].mean(axis=0)).max() < 0.5  # found the mode


class TestDiagnostics:
    def test_rhat_near_one_for_iid(self):
        rng = np.random.default_rng(0)
        draws = rng.standard_normal((4, 1000, 3))
        r = split_rhat(draws)
        assert np.all(np.abs(r - 1.0) < 0.02)

    def test_rhat_detects_separated_chains(self):
        rng = np.random.default_rng(1)
        draws = rng.standard_normal((2, 500, 1))
        draws[0] += 5.0
        draws[1] -= 5.0
        assert split_rhat(draws)[0] > 1.1

    def test_rhat_needs_two_chains(self):
        with pytest.raises(ValueError):
            split_rhat(np.zeros((1, 100, 2)))

    def test_ess_iid(self):
        rng = np.random.default_rng(2)
        draws = rng.standard_normal((4, 2000, 1))
        ess = effective_sample_size(draws)[0]
        assert ess == pytest.approx(8000, rel=0.15)

    def test_ess_ar1_analytic(self):
        # analytic ESS of an AR(1) chain is n * (1 - rho) / (1 + rho)
        rho, n, chains = 0.6, 20000, 4
        rng = np.random.default_rng(3)
        draws = np.empty((chains, n, 1))
        for c in range(chains):
            e = rng.standard_normal(n)
            x = np.empty(n)
            x[0] = e[0] / np.sqrt(1 - rho**2)
            for t in range(1, n):
                x[t] = rho * x[t - 1] + e[t]
            draws[c, :, 0] = x
        ess = effective_sample_size(draws)[0]
        expected = chains * n * (1 - rho) / (1 + rho)
        assert ess == pytest.approx(expected, rel=0.2)

    def test_diagnostics_flags(self):
        rng = np.random.default_rng(4)
        draws = rng.standard_normal((2, 400, 2))
        draws[0, :, 1] += 4.0
        rep = diagnostics(draws, names=["good", "bad"])
        assert rep.flagged == ["bad"]
        assert rep.max_rhat() > 1.1
