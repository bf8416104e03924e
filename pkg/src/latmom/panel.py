"""Panel containers and the latent regression structure.

Each of the four latent distribution parameters gets its own linear
predictor built from covariates, an optional subject intercept (direct or
multiple-membership), and an optional AR(1) error, then passes through its
link: identity for location and skewness, log for scale and tail weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sas import SasParams, event_prob_arrays

MOMENTS = ("mu", "sigma", "nu", "tau")
VARIANTS = ("full", "noskew", "notail")

# exp() saturates instead of overflowing; e^700 is still a finite double.
LINK_CLIP = 700.0

__all__ = [
    "MOMENTS",
    "VARIANTS",
    "PanelData",
    "PanelIndex",
    "MomentSpec",
    "MomentCoefficients",
    "ParamTable",
    "apply_links",
    "apply_links_arrays",
    "mm_effect",
    "ar1_simulate",
    "ar1_logdensity",
    "linear_predictor",
    "assemble_params",
]


@dataclass
class PanelData:
    """Long-format binary panel.

    subject holds integer codes 0..N-1; X maps each moment to its design
    matrix (one row per observation, possibly zero columns); membership is
    an optional (N, G) weight matrix with rows on the simplex.
    """

    subject: np.ndarray
    time: np.ndarray
    y: np.ndarray
    X: dict[str, np.ndarray]
    membership: np.ndarray | None = None
    subject_labels: np.ndarray | None = None
    column_names: dict[str, tuple[str, ...]] | None = None

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = self.subject.size
        if not (self.time.size == n and self.y.size == n and n > 0):
            raise ValueError("subject, time and y must be equal-length and non-empty")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("y must be binary")
        if self.subject.min() != 0:
            raise ValueError("subject codes must start at 0")
        counts = np.bincount(self.subject)
        if (counts == 0).any():
            raise ValueError("every subject code in 0..N-1 needs at least one observation")
        for m in MOMENTS:
            if m not in self.X:
                raise ValueError(f"design matrix for moment {m!r} missing")
            self.X[m] = np.atleast_2d(np.asarray(self.X[m], dtype=float))
            if self.X[m].shape[0] != n:
                raise ValueError(f"design matrix for {m!r} has {self.X[m].shape[0]} rows, expected {n}")
            if not np.isfinite(self.X[m]).all():
                raise ValueError(f"non-finite covariate in design matrix for {m!r}")
        if self.membership is not None:
            W = np.asarray(self.membership, dtype=float)
            if W.ndim != 2 or W.shape[0] != counts.size:
                raise ValueError("membership matrix must be (n_subjects, n_groups)")
            if (W < 0).any():
                raise ValueError("membership weights must be non-negative")
            bad = np.abs(W.sum(axis=1) - 1.0) > 1e-9
            if bad.any():
                raise ValueError(f"membership rows must sum to 1; offending subjects {np.flatnonzero(bad)[:5]}")
            self.membership = W

    @property
    def n_obs(self) -> int:
        return self.subject.size

    @property
    def n_subjects(self) -> int:
        return int(self.subject.max()) + 1

    @property
    def n_groups(self) -> int:
        return 0 if self.membership is None else self.membership.shape[1]


class PanelIndex:
    """Padded (subject, within-subject-order) view used by AR recursions.

    Observations are ordered by time within subject; ``obs_idx[i, t]`` is
    the flat row index of subject i's t-th observation, -1 past the end.
    """

    def __init__(self, data: PanelData):
        order = np.lexsort((data.time, data.subject))
        counts = np.bincount(data.subject, minlength=data.n_subjects)
        self.n_subjects = data.n_subjects
        self.t_max = int(counts.max())
        self.counts = counts
        self.mask = np.arange(self.t_max)[None, :] < counts[:, None]
        self.obs_idx = np.full((self.n_subjects, self.t_max), -1, dtype=np.int64)
        self.obs_idx[self.mask] = order  # lexsort emits subject-major blocks

    def scatter(self, padded: np.ndarray) -> np.ndarray:
        """Padded (N, Tmax) values -> flat per-observation vector."""
        out = np.empty(int(self.counts.sum()))
        out[self.obs_idx[self.mask]] = padded[self.mask]
        return out

    def gather(self, flat: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Flat per-observation vector -> padded (N, Tmax) array."""
        out = np.full((self.n_subjects, self.t_max), fill)
        out[self.mask] = flat[self.obs_idx[self.mask]]
        return out


def _per_moment(value, cast) -> dict[str, bool]:
    if isinstance(value, dict):
        return {m: cast(value.get(m, False)) for m in MOMENTS}
    return {m: cast(value) for m in MOMENTS}


@dataclass(frozen=True)
class MomentSpec:
    """Which structure each latent parameter's regression carries."""

    columns: dict[str, tuple[str, ...]]
    random_intercept: dict[str, bool]
    ar1: dict[str, bool]
    multiple_membership: bool = False
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @classmethod
    def uniform(cls, columns, *, random_intercept=True, ar1=False,
                multiple_membership=False, variant="full") -> "MomentSpec":
        """Same covariates and flags for all four moments."""
        cols = {m: tuple(columns) for m in MOMENTS}
        return cls(
            columns=cols,
            random_intercept=_per_moment(random_intercept, bool),
            ar1=_per_moment(ar1, bool),
            multiple_membership=multiple_membership,
            variant=variant,
        )

    def active_moments(self) -> tuple[str, ...]:
        """Moments that carry free parameters under the variant."""
        if self.variant == "noskew":
            return ("mu", "sigma", "tau")
        if self.variant == "notail":
            return ("mu", "sigma")
        return MOMENTS

    def is_active(self, m: str) -> bool:
        return m in self.active_moments()


@dataclass
class MomentCoefficients:
    """Realized parameter values for direct (non-sampled) assembly.

    intercepts holds one b_i per subject per moment; for multiple
    membership, group_effects holds gamma_g per group instead.  ar_terms
    holds realized AR(1) errors aligned with the panel rows.
    """

    beta: dict[str, np.ndarray]
    intercepts: dict[str, np.ndarray] = field(default_factory=dict)
    group_effects: dict[str, np.ndarray] = field(default_factory=dict)
    ar_terms: dict[str, np.ndarray] = field(default_factory=dict)
    ar_rho: dict[str, float] = field(default_factory=dict)
    ar_scale: dict[str, float] = field(default_factory=dict)
    re_scale: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for m, rho in self.ar_rho.items():
            if not abs(rho) < 1.0:
                raise ValueError(f"ar_rho[{m!r}] must satisfy |rho| < 1, got {rho}")
        for m, s in self.re_scale.items():
            if s <= 0:
                raise ValueError(f"re_scale[{m!r}] must be > 0, got {s}")


@dataclass
class ParamTable:
    """One latent parameter quadruple per observation, post-link."""

    mu: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    tau: np.ndarray

    @property
    def n(self) -> int:
        return self.mu.size

    def row(self, k: int) -> SasParams:
        return SasParams(float(self.mu[k]), float(self.sigma[k]),
                         float(self.nu[k]), float(self.tau[k]))

    def event_probs(self) -> np.ndarray:
        return event_prob_arrays(self.mu, self.sigma, self.nu, self.tau)


def apply_links_arrays(mu_raw, sigma_raw, nu_raw, tau_raw):
    """Raw predictors -> (mu, sigma, nu, tau); log-links keep sigma, tau > 0."""
    sigma = np.exp(np.clip(sigma_raw, -LINK_CLIP, LINK_CLIP))
    tau = np.exp(np.clip(tau_raw, -LINK_CLIP, LINK_CLIP))
    return np.asarray(mu_raw, dtype=float), sigma, np.asarray(nu_raw, dtype=float), tau


def apply_links(raw) -> SasParams:
    """Scalar form of :func:`apply_links_arrays`."""
    mu, sigma, nu, tau = raw
    return SasParams(
        float(mu),
        float(np.exp(np.clip(sigma, -LINK_CLIP, LINK_CLIP))),
        float(nu),
        float(np.exp(np.clip(tau, -LINK_CLIP, LINK_CLIP))),
    )


def mm_effect(weights, gamma) -> float:
    """Convex combination of group effects for one subject."""
    w = np.asarray(weights, dtype=float)
    g = np.asarray(gamma, dtype=float)
    if w.shape != g.shape:
        raise ValueError("weights and group effects must align")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must lie on the simplex (sum {w.sum()!r})")
    return float(w @ g)


def ar1_simulate(T: int, rho: float, scale: float, seed) -> np.ndarray:
    """Stationary Gaussian AR(1) path of length T.

    The first value is drawn from the stationary marginal with standard
    deviation scale / sqrt(1 - rho^2); scale is the innovation sd.
    """
    if not abs(rho) < 1.0:
        raise ValueError(f"AR(1) requires |rho| < 1, got {rho}")
    if scale <= 0 or T < 1:
        raise ValueError("scale must be > 0 and T >= 1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(T)
    u = np.empty(T)
    u[0] = scale / np.sqrt(1.0 - rho * rho) * eps[0]
    for t in range(1, T):
        u[t] = rho * u[t - 1] + scale * eps[t]
    return u


def ar1_logdensity(u, rho: float, scale: float) -> float:
    """Exact Gaussian joint log-density of a stationary AR(1) path."""
    if not abs(rho) < 1.0:
        raise ValueError(f"AR(1) requires |rho| < 1, got {rho}")
    if scale <= 0:
        raise ValueError("scale must be > 0")
    u = np.asarray(u, dtype=float)
    s0 = scale / np.sqrt(1.0 - rho * rho)
    ll = -0.5 * (u[0] / s0) ** 2 - np.log(s0) - 0.5 * np.log(2 * np.pi)
    if u.size > 1:
        resid = u[1:] - rho * u[:-1]
        ll += np.sum(-0.5 * (resid / scale) ** 2 - np.log(scale) - 0.5 * np.log(2 * np.pi))
    return float(ll)


def _subject_effect(m: str, data: PanelData, coef: MomentCoefficients) -> np.ndarray | None:
    """Per-subject intercept vector for moment m, or None if absent."""
    if m in coef.group_effects and coef.group_effects[m] is not None:
        if data.membership is None:
            raise ValueError("group effects supplied but panel has no membership matrix")
        gamma = np.asarray(coef.group_effects[m], dtype=float)
        if gamma.size != data.n_groups:
            raise ValueError(f"group effects for {m!r} have size {gamma.size}, expected {data.n_groups}")
        return data.membership @ gamma
    if m in coef.intercepts and coef.intercepts[m] is not None:
        b = np.asarray(coef.intercepts[m], dtype=float)
        if b.size != data.n_subjects:
            raise ValueError(f"intercepts for {m!r} have size {b.size}, expected {data.n_subjects}")
        return b
    return None


def linear_predictor(m: str, i: int, t, data: PanelData, coef: MomentCoefficients) -> float:
    """Raw (pre-link) predictor for moment m at subject i, time t."""
    if m not in MOMENTS:
        raise ValueError(f"unknown moment {m!r}")
    rows = np.flatnonzero((data.subject == i) & (data.time == t))
    if rows.size != 1:
        raise KeyError(f"no unique observation for subject {i} at time {t}")
    k = int(rows[0])
    beta = np.asarray(coef.beta.get(m, np.zeros(0)), dtype=float)
    if beta.size != data.X[m].shape[1]:
        raise ValueError(
            f"coefficients for {m!r} have size {beta.size}, design has {data.X[m].shape[1]} columns"
        )
    out = float(data.X[m][k] @ beta) if beta.size else 0.0
    b = _subject_effect(m, data, coef)
    if b is not None:
        out += float(b[i])
    if m in coef.ar_terms and coef.ar_terms[m] is not None:
        out += float(coef.ar_terms[m][k])
    return out


def assemble_params(data: PanelData, coef: MomentCoefficients, spec: MomentSpec) -> ParamTable:
    """One valid parameter quadruple per observation.

    Applies linear predictors, subject effects (direct or weighted group
    sums), AR(1) terms, links, and the variant constraints (noskew fixes
    nu = 0; notail fixes nu = 0 and tau = 1).
    """
    raw = {}
    for m in MOMENTS:
        if not spec.is_active(m):
            raw[m] = np.zeros(data.n_obs)
            continue
        beta = np.asarray(coef.beta.get(m, np.zeros(0)), dtype=float)
        if beta.size != data.X[m].shape[1]:
            raise ValueError(
                f"coefficients for {m!r} have size {beta.size}, design has {data.X[m].shape[1]} columns"
            )
        eta = data.X[m] @ beta if beta.size else np.zeros(data.n_obs)
        if spec.random_intercept[m]:
            b = _subject_effect(m, data, coef)
            if b is not None:
                eta = eta + b[data.subject]
        if spec.ar1[m] and m in coef.ar_terms and coef.ar_terms[m] is not None:
            u = np.asarray(coef.ar_terms[m], dtype=float)
            if u.size != data.n_obs:
                raise ValueError(f"AR terms for {m!r} have size {u.size}, expected {data.n_obs}")
            eta = eta + u
        raw[m] = eta
    mu, sigma, nu, tau = apply_links_arrays(raw["mu"], raw["sigma"], raw["nu"], raw["tau"])
    return ParamTable(mu, sigma, nu, tau)
