"""Tests for the GEE and GLMM reference estimators."""

import numpy as np
import pytest
from scipy.special import expit

from latmom.baselines import GeeFit, GlmmFit, baseline_predict, fit_gee, fit_glm, fit_glmm
from latmom.panel import MOMENTS, PanelData


def logistic_panel(n_subjects, t_per, beta, re_sd, seed, rho_dup=False):
    """Clustered logistic data; rho_dup duplicates one outcome per subject
    to force strong within-subject correlation."""
    rng = np.random.default_rng(seed)
    n = n_subjects * t_per
    subject = np.repeat(np.arange(n_subjects), t_per)
    time = np.tile(np.arange(t_per, dtype=float), n_subjects)
    x1 = np.repeat(rng.uniform(-1, 1, n_subjects), t_per)
    x2 = rng.uniform(-1, 1, n)
    X = np.column_stack([np.ones(n), x1, x2])
    b = np.repeat(rng.normal(0, re_sd, n_subjects), t_per)
    p = expit(X @ beta + b)
    y = (rng.uniform(size=n) < p).astype(int)
    if rho_dup:
        y = np.repeat(y.reshape(n_subjects, t_per)[:, :1], t_per, axis=1).ravel()
    data = PanelData(
        subject, time, y, {m: X for m in MOMENTS},
        column_names={m: ("const", "x1", "x2") for m in MOMENTS},
    )
    return data, X


BETA = np.array([0.3, 0.8, -0.5])


class TestGee:
    def test_independence_reduces_to_glm(self):
        data, X = logistic_panel(150, 4, BETA, 0.8, seed=1)
        gee = fit_gee(data, force_alpha=0.0)
        glm_beta, ok = fit_glm(X, data.y.astype(float))
        assert ok and gee.converged
        assert np.abs(gee.coef - glm_beta).max() < 1e-6

    def test_duplicated_outcomes_give_positive_alpha(self):
        data, _ = logistic_panel(120, 4, BETA, 0.0, seed=2, rho_dup=True)
        gee = fit_gee(data)
        assert gee.converged
        assert gee.alpha > 0.5

    def test_independent_outcomes_give_small_alpha(self):
        data, _ = logistic_panel(300, 4, BETA, 0.0, seed=3)
        gee = fit_gee(data)
        assert abs(gee.alpha) < 0.1

    @pytest.mark.slow
    def test_simulation_oracle_with_robust_errors(self):
        # estimates within 3 robust SEs of the truth in >= 95% of seeds
        hits = 0
        for seed in range(100):
            data, _ = logistic_panel(500, 6, BETA, 0.0, seed=100 + seed)
            gee = fit_gee(data)
            ok = gee.converged and np.all(np.abs(gee.coef - BETA) <= 3 * gee.se)
            hits += ok
        assert hits >= 95

    def test_estimating_equation_norm_decreases(self):
        data, _ = logistic_panel(200, 5, BETA, 0.7, seed=4)
        gee = fit_gee(data)
        norms = gee.ee_norm_history[2:]
        assert all(b <= a * 1.001 for a, b in zip(norms, norms[1:]))

    def test_subject_relabeling_invariance(self):
        data, _ = logistic_panel(80, 4, BETA, 0.6, seed=5)
        gee_a = fit_gee(data)
        perm = np.arange(80)[::-1]
        order = np.argsort(perm[data.subject], kind="stable")
        data_b = PanelData(
            perm[data.subject][order], data.time[order], data.y[order],
            {m: data.X[m][order] for m in MOMENTS},
            column_names=data.column_names,
        )
        gee_b = fit_gee(data_b)
        np.testing.assert_allclose(gee_a.coef, gee_b.coef, rtol=1e-8)
        assert gee_a.alpha == pytest.approx(gee_b.alpha, rel=1e-8)


class TestGlmm:
    def test_zero_variance_reduces_to_glm(self):
        data, X = logistic_panel(250, 4, BETA, 0.0, seed=26)
        glmm = fit_glmm(data)
        glm_beta, _ = fit_glm(X, data.y.astype(float))
        assert glmm.re_variance <= 1e-3
        assert glmm.boundary
        assert np.abs(glmm.coef - glm_beta).max() < 1e-3

    def test_laplace_vs_adaptive_nodes(self):
        # one quadrature node is the Laplace approximation; on a
        # well-separated instance it agrees with the 15-node fit within 10%
        data, _ = logistic_panel(250, 6, np.array([0.5, 1.2, -0.9]), 1.0, seed=7)
        fit1 = fit_glmm(data, quadrature_nodes=1)
        fit15 = fit_glmm(data, quadrature_nodes=15)
        assert not fit15.boundary
        rel = np.abs(fit1.coef - fit15.coef) / np.abs(fit15.coef)
        assert rel.max() < 0.10
        assert fit1.re_variance == pytest.approx(fit15.re_variance, rel=0.15)

    @pytest.mark.slow
    def test_variance_recovery_simulation(self):
        # true random-intercept variance 1.0; estimates stay in [0.5, 1.7]
        estimates = []
        for seed in range(100):
            data, _ = logistic_panel(500, 6, BETA, 1.0, seed=300 + seed)
            glmm = fit_glmm(data)
            estimates.append(glmm.re_variance)
        estimates = np.array(estimates)
        assert 0.5 <= estimates.mean() <= 1.7
        assert np.mean((estimates >= 0.5) & (estimates <= 1.7)) >= 0.90

    def test_loglik_improves_with_random_effect(self):
        data, X = logistic_panel(200, 6, BETA, 1.2, seed=8)
        glmm = fit_glmm(data)
        beta_glm, _ = fit_glm(X, data.y.astype(float))
        eta = X @ beta_glm
        ll_glm = float(np.sum(data.y * eta - np.log1p(np.exp(eta))))
        assert glmm.loglik > ll_glm

    def test_relabeling_invariance(self):
        data, _ = logistic_panel(60, 4, BETA, 0.8, seed=9)
        fit_a = fit_glmm(data)
        perm = np.arange(60)[::-1]
        order = np.argsort(perm[data.subject], kind="stable")
        data_b = PanelData(
            perm[data.subject][order], data.time[order], data.y[order],
            {m: data.X[m][order] for m in MOMENTS},
            column_names=data.column_names,
        )
        fit_b = fit_glmm(data_b)
        np.testing.assert_allclose(fit_a.coef, fit_b.coef, atol=1e-6)


class TestPredict:
    def test_zero_coefficients_give_half(self):
        data, _ = logistic_panel(20, 3, BETA, 0.5, seed=10)
        fit = GeeFit(
            coef=np.zeros(3), cov=np.eye(3), alpha=0.0, scale=1.0, converged=True,
            n_iter=1, separated=False, column_names=("const", "x1", "x2"),
        )
        np.testing.assert_allclose(baseline_predict(fit, data), 0.5)

    def test_probabilities_in_unit_interval(self):
        data, _ = logistic_panel(100, 4, BETA, 0.9, seed=11)
        for fit in (fit_gee(data), fit_glmm(data)):
            p = baseline_predict(fit, data)
            assert np.all((p > 0) & (p < 1))

    def test_glmm_conditional_vs_numeric_posterior_predictive(self):
        # 3-subject toy: plug-in conditional-mode probabilities agree with
        # the numerically integrated posterior predictive within 0.02
        rng = np.random.default_rng(12)
        n_sub, t_per = 3, 6
        subject = np.repeat(np.arange(n_sub), t_per)
        time = np.tile(np.arange(t_per, dtype=float), n_sub)
        X = np.column_stack([np.ones(n_sub * t_per), rng.uniform(-1, 1, n_sub * t_per)])
        y = np.array([1, 1, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 1, 0, 1, 0, 1, 1])
        data = PanelData(
            subject, time, y, {m: X for m in MOMENTS},
            column_names={m: ("const", "x1") for m in MOMENTS},
        )
        glmm = fit_glmm(data, quadrature_nodes=25)
        plug_in = baseline_predict(glmm, data)
        # numeric posterior predictive per subject on a dense b-grid
        psi2 = max(glmm.re_variance, 1e-8)
        bgrid = np.linspace(-6, 6, 4001) * np.sqrt(psi2)
        eta = X @ glmm.coef
        for i in range(n_sub):
            rows = np.flatnonzero(subject == i)
            lik = np.ones_like(bgrid)
            for k in rows:
                pk = expit(eta[k] + bgrid)
                lik *= pk if y[k] else (1 - pk)
            post = lik * np.exp(-0.5 * bgrid**2 / psi2)
            post /= np.trapezoid(post, bgrid)
            for k in rows:
                predictive = np.trapezoid(expit(eta[k] + bgrid) * post, bgrid)
                assert abs(plug_in[k] - predictive) < 0.02

    def test_rejects_unknown_fit(self):
        data, _ = logistic_panel(10, 2, BETA, 0.1, seed=13)
        with pytest.raises(TypeError):
            baseline_predict(object(), data)
