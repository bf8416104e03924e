"""Reference estimators: logistic GEE and a random-intercept logistic GLMM.

The GEE uses an exchangeable working correlation with moment estimation of
the correlation parameter inside Fisher scoring.  The GLMM integrates the
scalar subject intercept by adaptive Gauss-Hermite quadrature and
maximizes the marginal likelihood with a quasi-Newton optimizer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize
from scipy.special import expit

from .panel import PanelData

__all__ = ["GeeFit", "GlmmFit", "fit_gee", "fit_glmm", "fit_glm", "baseline_predict"]

_MAX_COEF = 30.0  # beyond this the logit fit has effectively separated


@dataclass
class GeeFit:
    coef: np.ndarray
    cov: np.ndarray              # robust (sandwich) covariance
    alpha: float                 # exchangeable working correlation
    scale: float
    converged: bool
    n_iter: int
    separated: bool
    column_names: tuple
    ee_norm_history: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


@dataclass
class GlmmFit:
    coef: np.ndarray
    re_variance: float
    cov: np.ndarray              # approximate covariance of fixed effects
    loglik: float
    converged: bool
    boundary: bool               # variance pushed to ~0, refit as plain GLM
    column_names: tuple
    conditional_modes: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _design(data: PanelData, covariates, intercept=True):
    """Stack the requested covariate columns (pooled across moments is not
    needed here; baselines read from the location design by convention)."""
    X = data.X["mu"]
    names = None
    if data.column_names and "mu" in data.column_names:
        names = list(data.column_names["mu"])
    if covariates is None:
        cols = X
        col_names = tuple(names) if names else tuple(f"x{j}" for j in range(X.shape[1]))
    else:
        if names is None:
            raise ValueError("panel has no column names; pass covariates=None")
        idx = [names.index(c) for c in covariates]
        cols = X[:, idx]
        col_names = tuple(covariates)
    if intercept and not (cols.shape[1] and np.allclose(cols[:, 0], 1.0)):
        cols = np.column_stack([np.ones(data.n_obs), cols])
        col_names = ("const",) + col_names
    return cols, col_names


def fit_glm(X: np.ndarray, y: np.ndarray, *, tol=1e-10, max_iter=100):
    """Plain logistic regression by iteratively reweighted least squares."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        p = expit(eta)
        w = np.maximum(p * (1 - p), 1e-10)
        z = eta + (y - p) / w
        beta_new = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * z))
        if not np.isfinite(beta_new).all() or np.abs(beta_new).max() > _MAX_COEF:
            return beta_new, False
        if np.abs(beta_new - beta).max() < tol:
            return beta_new, True
        beta = beta_new
    return beta, False


def _padded(data: PanelData):
    """(N, Tmax) padded index and mask, time-ordered within subject."""
    from .panel import PanelIndex

    idx = PanelIndex(data)
    return idx.obs_idx, idx.mask


def fit_gee(data: PanelData, covariates=None, *, force_alpha=None,
            tol=1e-8, max_iter=200) -> GeeFit:
    """Logit-link GEE with exchangeable working correlation.

    The correlation parameter is re-estimated from Pearson residuals at
    every Fisher-scoring step; force_alpha pins it (0 gives the
    independence fit, which equals the plain logistic GLM).
    """
    X, col_names = _design(data, covariates)
    y = data.y.astype(float)
    n, p = X.shape
    obs_idx, mask = _padded(data)
    cluster_sizes = mask.sum(axis=1)
    t_max = int(cluster_sizes.max())
    n_pairs = float(np.sum(cluster_sizes * (cluster_sizes - 1) / 2))

    beta, _ = fit_glm(X, y, tol=1e-6)
    if not np.isfinite(beta).all():
        beta = np.zeros(p)
    alpha = 0.0 if force_alpha is None else float(force_alpha)
    converged = False
    separated = False
    ee_history = []

    Xp = np.where(mask[:, :, None], X[np.maximum(obs_idx, 0)], 0.0)  # (N, Tmax, p)
    yp = np.where(mask, y[np.maximum(obs_idx, 0)], 0.0)

    it = 0
    for it in range(1, max_iter + 1):
        eta = np.einsum("ntp,p->nt", Xp, beta)
        mu = expit(eta)
        mu = np.where(mask, mu, 0.0)
        var = np.where(mask, np.maximum(mu * (1 - mu), 1e-10), 1.0)
        resid = np.where(mask, (yp - mu) / np.sqrt(var), 0.0)

        if force_alpha is None:
            scale = float(np.sum(resid**2) / (mask.sum() - p))
            if n_pairs > p:
                cross = 0.5 * (resid.sum(axis=1) ** 2 - (resid**2).sum(axis=1)).sum()
                alpha = float(cross / (scale * (n_pairs - p)))
                hi = 1.0 / (t_max - 1.0) if t_max > 1 else 1.0
                alpha = float(np.clip(alpha, -0.99 * hi, 0.99))
        else:
            scale = 1.0

        # exchangeable inverse: R^-1 = (I - a/(1+(T-1)a) * J) / (1-a)
        sqv = np.sqrt(var)
        U = np.zeros(p)
        H = np.zeros((p, p))
        meat = np.zeros((p, p))
        for size in np.unique(cluster_sizes):
            rows = np.flatnonzero(cluster_sizes == size)
            size = int(size)
            msk = mask[rows, :size]
            D = Xp[rows, :size, :] * (var[rows, :size] * 1.0)[:, :, None]  # A X
            r = (yp[rows, :size] - mu[rows, :size])
            sv = sqv[rows, :size]
            c1 = 1.0 / (1.0 - alpha)
            c2 = alpha / ((1.0 - alpha) * (1.0 + (size - 1) * alpha))
            # V^{-1} x = A^{-1/2} R^{-1} A^{-1/2} x
            def vinv(vec):
                t = vec / sv
                t = c1 * t - c2 * t.sum(axis=1, keepdims=True)
                return t / sv
            Vr = vinv(r)
            VD = np.stack([vinv(D[:, :, j]) for j in range(p)], axis=2)
            U += np.einsum("ntp,nt->p", D, Vr)
            H += np.einsum("ntp,ntq->pq", D, VD)
            s = np.einsum("ntp,nt->np", D, Vr)
            meat += s.T @ s
        ee_history.append(float(np.linalg.norm(U)))
        step = np.linalg.solve(H, U)
        beta_new = beta + step
        if np.abs(beta_new).max() > _MAX_COEF:
            separated = True
            beta = beta_new
            break
        delta = np.abs(beta_new - beta).max()
        beta = beta_new
        if delta < tol:
            converged = True
            break

    cov = np.linalg.solve(H, np.linalg.solve(H, meat).T)
    return GeeFit(
        coef=beta, cov=cov, alpha=alpha, scale=scale, converged=converged,
        n_iter=it, separated=separated, column_names=col_names,
        ee_norm_history=ee_history,
    )


def _glmm_parts(data: PanelData, covariates):
    X, col_names = _design(data, covariates)
    y = data.y.astype(float)
    obs_idx, mask = _padded(data)
    Xp = np.where(mask[:, :, None], X[np.maximum(obs_idx, 0)], 0.0)
    yp = np.where(mask, y[np.maximum(obs_idx, 0)], 0.0)
    return X, col_names, Xp, yp, mask


def _conditional_modes(eta, yp, mask, psi2, *, tol=1e-10, max_iter=60):
    """Per-subject Newton mode of the integrand (vectorized over subjects)."""
    b = np.zeros(eta.shape[0])
    for _ in range(max_iter):
        p = expit(eta + b[:, None])
        g = np.where(mask, yp - p, 0.0).sum(axis=1) - b / psi2
        h = -np.where(mask, p * (1 - p), 0.0).sum(axis=1) - 1.0 / psi2
        step = g / h
        b = b - step
        if np.abs(step).max() < tol:
            break
    return b, -h


def _glmm_loglik(theta, Xp, yp, mask, nodes, weights):
    p_fix = Xp.shape[2]
    beta = theta[:p_fix]
    psi2 = math.exp(2.0 * theta[p_fix])
    eta = np.einsum("ntp,p->nt", Xp, beta)
    b_hat, curv = _conditional_modes(eta, yp, mask, psi2)
    sd_hat = 1.0 / np.sqrt(curv)
    # adaptive Gauss-Hermite centered at the mode
    b_nodes = b_hat[:, None] + sd_hat[:, None] * nodes[None, :]       # (N, K)
    eta_nk = eta[:, :, None] + b_nodes[:, None, :]
    with np.errstate(over="ignore"):
        ll_obs = yp[:, :, None] * eta_nk - np.log1p(np.exp(np.where(eta_nk > 30, 30, eta_nk)))
        ll_obs = np.where(eta_nk > 30, yp[:, :, None] * eta_nk - eta_nk, ll_obs)
    ll_bin = np.where(mask[:, :, None], ll_obs, 0.0).sum(axis=1)      # (N, K)
    log_prior = -0.5 * b_nodes**2 / psi2 - 0.5 * math.log(2 * math.pi * psi2)
    # integral = sd * sum_k w_k exp(x_k^2/2) g(mode + sd x_k), with the raw
    # Hermite-e weights w_k (sum sqrt(2*pi)) for the e^{-x^2/2} kernel
    log_terms = ll_bin + log_prior + 0.5 * nodes[None, :] ** 2 + np.log(weights)[None, :]
    m = log_terms.max(axis=1, keepdims=True)
    log_int = m[:, 0] + np.log(np.exp(log_terms - m).sum(axis=1)) + np.log(sd_hat)
    return float(log_int.sum()), b_hat


def fit_glmm(data: PanelData, covariates=None, quadrature_nodes: int = 15,
             *, boundary_var=1e-3) -> GlmmFit:
    """Logistic random-intercept model by adaptive Gauss-Hermite quadrature.

    A variance estimate at or below ``boundary_var`` is flagged as a
    boundary solution and the fixed effects are refit as a plain GLM.
    """
    X, col_names, Xp, yp, mask = _glmm_parts(data, covariates)
    nodes, weights = hermegauss(quadrature_nodes)

    beta0, _ = fit_glm(X, data.y.astype(float), tol=1e-8)
    if not np.isfinite(beta0).all():
        beta0 = np.zeros(X.shape[1])
    x0 = np.concatenate([beta0, [math.log(0.5)]])

    def objective(theta):
        ll, _ = _glmm_loglik(theta, Xp, yp, mask, nodes, weights)
        return -ll

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        opt = minimize(
            objective, x0, method="L-BFGS-B",
            bounds=[(-_MAX_COEF, _MAX_COEF)] * X.shape[1] + [(-6.0, 3.0)],
            options={"maxiter": 300, "ftol": 1e-12, "gtol": 1e-8},
        )
    theta = opt.x
    psi2 = math.exp(2.0 * theta[-1])
    boundary = psi2 <= boundary_var
    ll, b_hat = _glmm_loglik(theta, Xp, yp, mask, nodes, weights)

    if boundary:
        beta, ok = fit_glm(X, data.y.astype(float), tol=1e-10)
        b_hat = np.zeros(data.n_subjects)
        converged = ok
    else:
        beta = theta[:-1]
        converged = bool(opt.success)

    # numeric Hessian of the negative log likelihood in the fixed effects
    p_fix = X.shape[1]
    h = 1e-4
    H = np.zeros((p_fix, p_fix))
    base = np.concatenate([beta, [theta[-1]]])
    for i in range(p_fix):
        for j in range(i, p_fix):
            t_pp = base.copy(); t_pp[[i, j]] += h
            t_pm = base.copy(); t_pm[i] += h; t_pm[j] -= h
            t_mp = base.copy(); t_mp[i] -= h; t_mp[j] += h
            t_mm = base.copy(); t_mm[[i, j]] -= h
            H[i, j] = H[j, i] = (
                objective(t_pp) - objective(t_pm) - objective(t_mp) + objective(t_mm)
            ) / (4 * h * h)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.full((p_fix, p_fix), np.nan)

    return GlmmFit(
        coef=beta, re_variance=0.0 if boundary else psi2, cov=cov, loglik=ll,
        converged=converged, boundary=boundary, column_names=col_names,
        conditional_modes=b_hat,
    )


def baseline_predict(fit, data: PanelData, covariates=None) -> np.ndarray:
    """Per-observation event probability under a baseline fit.

    GEE predictions are marginal; GLMM predictions condition on the
    estimated subject intercept (population level, b=0, for subjects
    beyond the fitted range).
    """
    X, _ = _design(data, covariates)
    if isinstance(fit, GeeFit):
        return expit(X @ fit.coef)
    if isinstance(fit, GlmmFit):
        eta = X @ fit.coef
        b = np.zeros(data.n_subjects)
        k = min(fit.conditional_modes.size, data.n_subjects)
        b[:k] = fit.conditional_modes[:k]
        return expit(eta + b[data.subject])
    raise TypeError(f"unknown fit type {type(fit).__name__}")
