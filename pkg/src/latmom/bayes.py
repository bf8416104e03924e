"""Bayesian inference for the latent threshold model.

The parameter vector lives on an unconstrained scale: regression
coefficients, standardized subject/group effects and AR(1) innovations
(non-centered), log random-effect scales, log AR innovation scales, and
atanh-transformed AR coefficients.  The log posterior and its analytic
gradient are exact for the's model's clamped Bernoulli likelihood, so the
sampler never needs finite differences.

The same machinery drives two likelihoods: the exact sinh-arcsinh event
probability, and a smoothed probability surface (pseudo-likelihood) when a
surface object is supplied.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .hmc import SamplerConfig, hmc_sample
from .panel import MOMENTS, PanelData, PanelIndex, MomentSpec, ParamTable, LINK_CLIP
from .sas import sas_pdf

__all__ = [
    "PriorConfig",
    "ParameterLayout",
    "PosteriorDraws",
    "ThresholdModel",
    "log_likelihood",
    "hmc_run",
    "posterior_event_probs",
    "posterior_moment_summaries",
    "latent_density_trajectory",
]

PROB_FLOOR = 1e-14
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SINH_CLIP = 700.0


@dataclass(frozen=True)
class PriorConfig:
    """Prior scales: normal for coefficients, half-Cauchy for sd parameters.

    beta_scale is a single value, a per-moment mapping, or a per-moment
    mapping to per-column sequences (e.g. a tight scale on the intercept
    of the log-scale equation to anchor the latent measurement scale,
    which binary outcomes cannot identify on their own).
    """

    beta_scale: float | dict = 5.0
    half_cauchy_scale: float = 2.5

    def __post_init__(self):
        def check(v):
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            if (arr <= 0).any():
                raise ValueError("beta prior scales must be > 0")

        if isinstance(self.beta_scale, dict):
            for v in self.beta_scale.values():
                check(v)
        else:
            check(self.beta_scale)
        if self.half_cauchy_scale <= 0:
            raise ValueError("half-Cauchy scale must be > 0")

    def lambda_for(self, m: str, size: int | None = None):
        """Prior sd per coefficient of moment m (scalar or length-size array)."""
        value = self.beta_scale.get(m, 5.0) if isinstance(self.beta_scale, dict) else self.beta_scale
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        if size is not None and arr.size not in (1, size):
            raise ValueError(
                f"prior scale for {m!r} has {arr.size} entries, design has {size} columns"
            )
        if arr.size == 1:
            return float(arr[0]) if size is None else np.full(size, float(arr[0]))
        return arr


@dataclass
class _Block:
    kind: str      # beta | re | log_scale | ar_eps | atanh_rho | log_ar_scale
    moment: str
    sl: slice


class ParameterLayout:
    """Maps the flat unconstrained vector to named model blocks."""

    def __init__(self, data: PanelData, spec: MomentSpec):
        self.blocks: list[_Block] = []
        self.names: list[str] = []
        pos = 0

        def add(kind, m, size, labels):
            nonlocal pos
            self.blocks.append(_Block(kind, m, slice(pos, pos + size)))
            self.names.extend(labels)
            pos += size

        for m in spec.active_moments():
            p_m = data.X[m].shape[1]
            colnames = None
            if data.column_names and m in data.column_names:
                colnames = data.column_names[m]
            elif m in spec.columns and len(spec.columns[m]) == p_m:
                colnames = spec.columns[m]
            if p_m:
                labels = [
                    f"beta_{m}_{colnames[j] if colnames else j}" for j in range(p_m)
                ]
                add("beta", m, p_m, labels)
            if spec.random_intercept[m]:
                if spec.multiple_membership:
                    if data.membership is None:
                        raise ValueError("multiple membership requested but panel has no weights")
                    G = data.n_groups
                    add("re", m, G, [f"z_{m}_g{g}" for g in range(G)])
                else:
                    N = data.n_subjects
                    add("re", m, N, [f"z_{m}_{i}" for i in range(N)])
                add("log_scale", m, 1, [f"log_psi_{m}"])
            if spec.ar1[m]:
                add("ar_eps", m, data.n_obs, [f"eps_{m}_{k}" for k in range(data.n_obs)])
                add("atanh_rho", m, 1, [f"atanh_rho_{m}"])
                add("log_ar_scale", m, 1, [f"log_kappa_{m}"])

        self.dim = pos
        self._index = {(b.kind, b.moment): b.sl for b in self.blocks}

    def get(self, kind: str, moment: str, state: np.ndarray) -> np.ndarray | None:
        sl = self._index.get((kind, moment))
        return None if sl is None else state[sl]

    def has(self, kind: str, moment: str) -> bool:
        return (kind, moment) in self._index

    def slice_of(self, kind: str, moment: str) -> slice:
        return self._index[(kind, moment)]

    def count(self, kind: str) -> int:
        return sum(b.sl.stop - b.sl.start for b in self.blocks if b.kind == kind)


@dataclass
class PosteriorDraws:
    """Retained draws over the unconstrained vector, chain-major."""

    names: list[str]
    draws: np.ndarray       # (chains, kept, dim)
    logp: np.ndarray        # (chains, kept)
    divergences: int
    accept_rate: float
    seed: int
    clamp_rate: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.draws).all():
            raise ValueError("posterior draws must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.matrix[:, self.names.index(name)]

    def to_csv(self, path, metadata: dict | None = None) -> None:
        """One row per draw with named columns (plus chain and lp__)."""
        with open(path, "w", newline="") as fh:
            if metadata:
                for k in sorted(metadata):
                    fh.write(f"# {k}: {metadata[k]}\n")
            writer = csv.writer(fh)
            writer.writerow(["chain", "lp__", *self.names])
            chains, kept, _ = self.draws.shape
            for c in range(chains):
                for k in range(kept):
                    writer.writerow(
                        [c, repr(float(self.logp[c, k])), *map(lambda v: repr(float(v)), self.draws[c, k])]
                    )


def _normal_logpdf_sum(x, sd):
    x = np.asarray(x, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), x.shape)
    return float(np.sum(-0.5 * (x / sd) ** 2 - np.log(sd)) - x.size * _LOG_SQRT_2PI)


def _half_cauchy_logpdf(x, scale):
    z2 = (x / scale) ** 2
    log_term = math.log1p(z2) if z2 < 1e300 else 2.0 * (math.log(x) - math.log(scale))
    return math.log(2.0 / math.pi) - math.log(scale) - log_term


def _half_cauchy_log_transformed(t, scale):
    """log density of exp(t) under Half-Cauchy(0, scale), plus log-Jacobian t."""
    z2log = 2.0 * (t - math.log(scale))
    log_term = math.log1p(math.exp(z2log)) if z2log < 700.0 else z2log
    return math.log(2.0 / math.pi) - math.log(scale) - log_term + t


def _half_cauchy_grad_transformed(t, scale):
    """d/dt of :func:`_half_cauchy_log_transformed`; bounded in (-1, 1]."""
    # 1 - 2*x^2/(scale^2 + x^2) with x = exp(t), written overflow-free
    if t < -300.0:
        return 1.0
    if t > 300.0:
        return -1.0
    return 1.0 - 2.0 / (1.0 + scale * scale * math.exp(-2.0 * t))


class ThresholdModel:
    """Log posterior with analytic gradient for the latent threshold model.

    With ``surface=None`` the likelihood uses the exact event probability;
    with a surface it becomes the smoothed pseudo-likelihood, with
    gradients flowing through the surface's analytic partials.
    """

    def __init__(self, data: PanelData, spec: MomentSpec, prior: PriorConfig,
                 surface=None):
        self.data = data
        self.spec = spec
        self.prior = prior
        self.surface = surface
        self.layout = ParameterLayout(data, spec)
        self.index = PanelIndex(data) if any(spec.ar1[m] for m in MOMENTS) else None
        self._y = data.y.astype(float)
        # surface clamp accounting (reset per sampling run)
        self.clamp_events = 0
        self.clamp_evals = 0
        # the prior is Gaussian in every coordinate except the transformed
        # scale and correlation parameters; cache precisions once
        prec = np.zeros(self.layout.dim)
        logconst = 0.0
        special = []
        for b in self.layout.blocks:
            if b.kind == "beta":
                lam = prior.lambda_for(b.moment, b.sl.stop - b.sl.start)
                prec[b.sl] = 1.0 / lam**2
                logconst += float(-np.sum(np.log(lam))) - (b.sl.stop - b.sl.start) * _LOG_SQRT_2PI
            elif b.kind in ("re", "ar_eps"):
                prec[b.sl] = 1.0
                logconst += -(b.sl.stop - b.sl.start) * _LOG_SQRT_2PI
            else:
                special.append((b.kind, b.sl.start))
        self._prior_prec = prec
        self._prior_logconst = logconst
        self._prior_special = special

    @property
    def dim(self) -> int:
        return self.layout.dim

    # ------------------------------------------------------------------
    # forward structure
    # ------------------------------------------------------------------

    def _forward(self, state):
        """Raw predictors per moment plus the caches the gradient needs."""
        data, spec, layout = self.data, self.spec, self.layout
        cache = {}
        eta = {}
        for m in MOMENTS:
            if not spec.is_active(m):
                eta[m] = np.zeros(data.n_obs)
                continue
            beta = layout.get("beta", m, state)
            e = data.X[m] @ beta if beta is not None else np.zeros(data.n_obs)
            info = {}
            if layout.has("re", m):
                z = layout.get("re", m, state)
                log_psi = float(layout.get("log_scale", m, state)[0])
                psi = float(np.exp(min(log_psi, 709.0)))
                if spec.multiple_membership:
                    b_subj = data.membership @ (psi * z)
                else:
                    b_subj = psi * z
                e = e + b_subj[data.subject]
                info.update(z=z, psi=psi, b_subj=b_subj)
            if layout.has("ar_eps", m):
                eps = layout.get("ar_eps", m, state)
                rho = math.tanh(float(layout.get("atanh_rho", m, state)[0]))
                kappa = float(np.exp(min(float(layout.get("log_ar_scale", m, state)[0]), 709.0)))
                idx = self.index
                eps_pad = idx.gather(eps)
                u_pad = np.empty_like(eps_pad)
                c0 = kappa / math.sqrt(1.0 - rho * rho)
                u_pad[:, 0] = c0 * eps_pad[:, 0]
                for t in range(1, idx.t_max):
                    u_pad[:, t] = rho * u_pad[:, t - 1] + kappa * eps_pad[:, t]
                e = e + idx.scatter(u_pad)
                info.update(eps_pad=eps_pad, u_pad=u_pad, rho=rho, kappa=kappa)
            eta[m] = e
            cache[m] = info
        return eta, cache

    def param_table(self, state) -> ParamTable:
        eta, _ = self._forward(state)
        sigma = np.exp(np.clip(eta["sigma"], -LINK_CLIP, LINK_CLIP))
        tau = np.exp(np.clip(eta["tau"], -LINK_CLIP, LINK_CLIP))
        return ParamTable(eta["mu"].copy(), sigma, eta["nu"].copy(), tau)

    # ------------------------------------------------------------------
    # observation-level likelihood and its gradient wrt raw predictors
    # ------------------------------------------------------------------

    def _obs_terms(self, eta):
        y = self._y
        sig_ok = np.abs(eta["sigma"]) < LINK_CLIP
        tau_ok = np.abs(eta["tau"]) < LINK_CLIP
        mu = eta["mu"]
        sigma = np.exp(np.clip(eta["sigma"], -LINK_CLIP, LINK_CLIP))
        nu = eta["nu"]
        tau = np.exp(np.clip(eta["tau"], -LINK_CLIP, LINK_CLIP))

        if self.surface is None:
            with np.errstate(over="ignore", invalid="ignore"):
                a = mu / sigma
                r = np.hypot(1.0, a)  # sqrt(1 + a^2) without overflow
                h = np.arcsinh(a)
                w = tau * h + nu
            w_ok = np.abs(w) < _SINH_CLIP
            wc = np.clip(w, -_SINH_CLIP, _SINH_CLIP)
            s = np.sinh(wc)
            p1 = ndtr(s)
            p0 = ndtr(-s)
            p1c = np.clip(p1, PROB_FLOOR, 1.0 - PROB_FLOOR)
            p0c = np.clip(p0, PROB_FLOOR, 1.0 - PROB_FLOOR)
            ll = float(np.sum(y * np.log(p1c) + (1.0 - y) * np.log(p0c)))
            with np.errstate(over="ignore", invalid="ignore"):
                phi = np.exp(-0.5 * s * s - _LOG_SQRT_2PI)
                g_s = y * (phi / p1c) * (p1 >= PROB_FLOOR) - (1.0 - y) * (phi / p0c) * (p0 >= PROB_FLOOR)
                g_w = g_s * np.cosh(wc) * w_ok
                live = g_w != 0.0  # avoid 0 * inf from saturated-link factors
                g_eta = {
                    "mu": np.where(live, g_w * tau / (sigma * r), 0.0),
                    "sigma": np.where(live, g_w * (-tau * a / r) * sig_ok, 0.0),
                    "nu": g_w,
                    "tau": np.where(live, g_w * tau * h * tau_ok, 0.0),
                }
            return ll, g_eta

        p1, grads, clamped = self.surface.eval_with_grad(mu, sigma, nu, tau)
        self.clamp_events += int(clamped.sum())
        self.clamp_evals += clamped.size
        p0 = 1.0 - p1
        p1c = np.clip(p1, PROB_FLOOR, 1.0 - PROB_FLOOR)
        p0c = np.clip(p0, PROB_FLOOR, 1.0 - PROB_FLOOR)
        ll = float(np.sum(y * np.log(p1c) + (1.0 - y) * np.log(p0c)))
        g_p = y / p1c * (p1 >= PROB_FLOOR) - (1.0 - y) / p0c * (p0 >= PROB_FLOOR)
        g_eta = {
            "mu": g_p * grads["mu"],
            "sigma": g_p * grads["sigma"] * sigma * sig_ok,
            "nu": g_p * grads["nu"],
            "tau": g_p * grads["tau"] * tau * tau_ok,
        }
        return ll, g_eta

    # ------------------------------------------------------------------
    # priors
    # ------------------------------------------------------------------

    def log_prior(self, state) -> float:
        c = self.prior.half_cauchy_scale
        total = float(-0.5 * np.dot(state * self._prior_prec, state)) + self._prior_logconst
        for kind, j in self._prior_special:
            v = float(state[j])
            if kind in ("log_scale", "log_ar_scale"):
                total += _half_cauchy_log_transformed(v, c)
            else:  # atanh_rho: uniform on (-1, 1) plus tanh Jacobian
                rho = math.tanh(v)
                total += -math.log(2.0) + math.log1p(-rho * rho)
        return total

    def _prior_gradient(self, state, grad):
        c = self.prior.half_cauchy_scale
        grad -= self._prior_prec * state
        for kind, j in self._prior_special:
            v = float(state[j])
            if kind in ("log_scale", "log_ar_scale"):
                grad[j] += _half_cauchy_grad_transformed(v, c)
            else:
                grad[j] += -2.0 * math.tanh(v)
        return grad

    # ------------------------------------------------------------------
    # posterior
    # ------------------------------------------------------------------

    def log_likelihood(self, state) -> float:
        eta, _ = self._forward(state)
        ll, _ = self._obs_terms(eta)
        return ll

    def log_posterior_and_gradient(self, state):
        state = np.asarray(state, dtype=float)
        data, spec, layout = self.data, self.spec, self.layout
        eta, cache = self._forward(state)
        if not all(np.isfinite(eta[m]).all() for m in MOMENTS):
            return -np.inf, np.zeros(layout.dim)  # invalid region, sampler rejects
        ll, g_eta = self._obs_terms(eta)
        value = ll + self.log_prior(state)
        grad = np.zeros(layout.dim)

        for m in spec.active_moments():
            g = g_eta[m]
            if layout.has("beta", m):
                grad[layout.slice_of("beta", m)] += data.X[m].T @ g
            info = cache.get(m, {})
            if layout.has("re", m):
                s_subj = np.bincount(data.subject, weights=g, minlength=data.n_subjects)
                psi, z = info["psi"], info["z"]
                if spec.multiple_membership:
                    grad[layout.slice_of("re", m)] += psi * (data.membership.T @ s_subj)
                else:
                    grad[layout.slice_of("re", m)] += psi * s_subj
                grad[layout.slice_of("log_scale", m)] += float(np.dot(s_subj, info["b_subj"]))
            if layout.has("ar_eps", m):
                idx = self.index
                rho, kappa = info["rho"], info["kappa"]
                eps_pad, u_pad = info["eps_pad"], info["u_pad"]
                g_pad = idx.gather(g)
                gbar = np.zeros_like(g_pad)
                gbar[:, -1] = g_pad[:, -1]
                for t in range(idx.t_max - 2, -1, -1):
                    gbar[:, t] = g_pad[:, t] + rho * gbar[:, t + 1]
                d_eps = kappa * gbar
                d_eps[:, 0] = kappa / math.sqrt(1.0 - rho * rho) * gbar[:, 0]
                grad[layout.slice_of("ar_eps", m)] += idx.scatter(d_eps)
                # d u / d rho, accumulated forward
                d_rho_pad = np.zeros_like(u_pad)
                d_rho_pad[:, 0] = kappa * rho * (1.0 - rho * rho) ** -1.5 * eps_pad[:, 0]
                for t in range(1, idx.t_max):
                    d_rho_pad[:, t] = u_pad[:, t - 1] + rho * d_rho_pad[:, t - 1]
                d_rho = float(np.sum(g_pad * d_rho_pad * idx.mask))
                grad[layout.slice_of("atanh_rho", m)] += d_rho * (1.0 - rho * rho)
                grad[layout.slice_of("log_ar_scale", m)] += float(np.sum(g_pad * u_pad * idx.mask))

        self._prior_gradient(state, grad)
        return value, grad

    # convenience wrappers -------------------------------------------------

    def reset_clamp_counters(self):
        self.clamp_events = 0
        self.clamp_evals = 0

    @property
    def clamp_rate(self) -> float:
        return self.clamp_events / self.clamp_evals if self.clamp_evals else 0.0

    def event_probs(self, state) -> np.ndarray:
        table = self.param_table(state)
        if self.surface is None:
            return table.event_probs()
        p, _ = self.surface.eval(table.mu, table.sigma, table.nu, table.tau)
        return p


def log_likelihood(data: PanelData, table: ParamTable) -> float:
    """Clamped Bernoulli log likelihood of a panel under a parameter table."""
    p1 = np.clip(table.event_probs(), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = data.y
    return float(np.sum(y * np.log(p1) + (1 - y) * np.log1p(-p1)))


def hmc_run(data: PanelData, spec: MomentSpec, prior: PriorConfig,
            cfg: SamplerConfig, *, surface=None, clamp_warn=0.01) -> PosteriorDraws:
    """Fit the threshold model by HMC and return the retained draws."""
    model = ThresholdModel(data, spec, prior, surface=surface)
    model.reset_clamp_counters()
    res = hmc_sample(model.log_posterior_and_gradient, model.dim, cfg)
    clamp_rate = model.clamp_rate
    if surface is not None and clamp_rate > clamp_warn:
        warnings.warn(
            f"{clamp_rate:.2%} of surface evaluations fell outside the grid box",
            RuntimeWarning,
        )
    return PosteriorDraws(
        names=list(model.layout.names),
        draws=res.draws,
        logp=res.logp,
        divergences=res.divergences,
        accept_rate=res.accept_rate,
        seed=cfg.seed,
        clamp_rate=clamp_rate,
    )


def _draw_iter(draws: PosteriorDraws, thin: int | None):
    mat = draws.matrix
    if thin and thin > 1:
        mat = mat[::thin]
    return mat


def posterior_event_probs(draws: PosteriorDraws, data: PanelData, spec: MomentSpec,
                          prior: PriorConfig | None = None, *, surface=None,
                          thin: int | None = None):
    """Per-observation posterior mean event probability and central 95% band."""
    model = ThresholdModel(data, spec, prior or PriorConfig(), surface=surface)
    mat = _draw_iter(draws, thin)
    probs = np.empty((mat.shape[0], data.n_obs))
    for k in range(mat.shape[0]):
        probs[k] = model.event_probs(mat[k])
    lo, hi = np.percentile(probs, [2.5, 97.5], axis=0)
    return probs.mean(axis=0), lo, hi


def posterior_moment_summaries(draws: PosteriorDraws, data: PanelData, spec: MomentSpec,
                               prior: PriorConfig | None = None, *, thin: int | None = None):
    """Posterior mean and 95% band of each latent parameter per observation."""
    model = ThresholdModel(data, spec, prior or PriorConfig())
    mat = _draw_iter(draws, thin)
    stack = {m: np.empty((mat.shape[0], data.n_obs)) for m in MOMENTS}
    for k in range(mat.shape[0]):
        table = model.param_table(mat[k])
        stack["mu"][k] = table.mu
        stack["sigma"][k] = table.sigma
        stack["nu"][k] = table.nu
        stack["tau"][k] = table.tau
    out = {}
    for m in MOMENTS:
        lo, hi = np.percentile(stack[m], [2.5, 97.5], axis=0)
        out[m] = (stack[m].mean(axis=0), lo, hi)
    return out


def latent_density_trajectory(draws: PosteriorDraws, data: PanelData, spec: MomentSpec,
                              subject: int, z_grid, prior: PriorConfig | None = None,
                              *, thin: int | None = None):
    """Posterior-mean latent density curves for one subject, keyed by time."""
    rows = np.flatnonzero(data.subject == subject)
    if rows.size == 0:
        raise KeyError(f"unknown subject {subject}")
    model = ThresholdModel(data, spec, prior or PriorConfig())
    mat = _draw_iter(draws, thin)
    z_grid = np.asarray(z_grid, dtype=float)
    curves = {float(data.time[k]): np.zeros_like(z_grid) for k in rows}
    for s in range(mat.shape[0]):
        table = model.param_table(mat[s])
        for k in rows:
            curves[float(data.time[k])] += sas_pdf(z_grid, table.row(k))
    for t in curves:
        curves[t] /= mat.shape[0]
    return curves
