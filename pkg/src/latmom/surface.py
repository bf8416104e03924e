"""Simulation-calibrated probability surface.

Builds a smooth map from latent parameter quadruples to event
probabilities: simulate threshold exceedance on a tensor grid, probit the
Monte Carlo estimates, and fit a tensor-product cubic spline with a ridge
penalty on second differences of the coefficients.  Because the training
design is a full grid, the penalized fit diagonalizes exactly: with
fitted values f and per-dimension penalty operators, the normal equations
become (I + lambda * kronecker-sum) f = data, solved in the joint
eigenbasis.  That also yields the exact effective degrees of freedom for
generalized cross-validation at every candidate penalty.

Coordinates are (mu, log sigma, nu, log tau); the response lives on the
probit scale so back-transformed values always stay inside (0, 1).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import ndtr, ndtri

from .panel import PanelData, ParamTable
from .sas import SasParams

DIMS = ("mu", "sigma", "nu", "tau")
_LOG_DIMS = ("sigma", "tau")
DEFAULT_RANGES = {"mu": (-4.0, 4.0), "sigma": (0.2, 5.0), "nu": (-2.0, 2.0), "tau": (0.3, 3.0)}
PROB_FLOOR = 1e-14
_MAGIC = "latmom-surface"
_VERSION = 1

__all__ = [
    "DIMS",
    "DEFAULT_RANGES",
    "MomentGrid",
    "SplineSurface",
    "ExactSurface",
    "generate_grid",
    "simulate_probabilities",
    "fit_surface",
    "surface_eval",
    "surface_grad",
    "pseudo_log_likelihood",
    "quad_fit",
    "save_surface",
    "load_surface",
]


@dataclass(frozen=True)
class MomentGrid:
    """Tensor grid of latent parameter combinations."""

    ranges: dict
    knots: dict            # original-scale knot vector per dimension
    mc_draws: int

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(self.knots[d]) for d in DIMS)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        """(n_points, 4) array in row-major (mu-slowest) order."""
        mesh = np.meshgrid(*[self.knots[d] for d in DIMS], indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])


def generate_grid(ranges=None, points_per_dim=12, mc_draws=10_000) -> MomentGrid:
    """Knot vectors per dimension: linear in mu and nu, log-spaced in
    sigma and tau.  points_per_dim may be an int or a per-dimension dict."""
    rng_map = dict(DEFAULT_RANGES)
    if ranges:
        rng_map.update(ranges)
    if isinstance(points_per_dim, int):
        counts = {d: points_per_dim for d in DIMS}
    else:
        counts = {d: int(points_per_dim.get(d, 12)) for d in DIMS}
    if mc_draws < 1:
        raise ValueError("mc_draws must be >= 1")
    knots = {}
    for d in DIMS:
        lo, hi = map(float, rng_map[d])
        if not lo < hi:
            raise ValueError(f"inverted range for {d}: ({lo}, {hi})")
        if counts[d] < 2:
            raise ValueError(f"need at least 2 points per dimension, got {counts[d]} for {d}")
        if d in _LOG_DIMS:
            if lo <= 0:
                raise ValueError(f"{d} range must be positive")
            knots[d] = np.geomspace(lo, hi, counts[d])
        else:
            knots[d] = np.linspace(lo, hi, counts[d])
    return MomentGrid(ranges=rng_map, knots=knots, mc_draws=mc_draws)


def simulate_probabilities(grid: MomentGrid, seed: int) -> np.ndarray:
    """Per grid point, the fraction of latent draws exceeding the threshold.

    Each point gets its own child generator derived from (seed, index), so
    results do not depend on evaluation order or chunking.
    """
    pts = grid.points()
    out = np.empty(pts.shape[0])
    mc = grid.mc_draws
    for k in range(pts.shape[0]):
        mu, sigma, nu, tau = pts[k]
        rng = np.random.default_rng(np.random.SeedSequence((seed, k)))
        y = rng.standard_normal(mc)
        z = mu + sigma * np.sinh((np.arcsinh(y) + nu) / tau)
        out[k] = np.count_nonzero(z > 0.0) / mc
    return out


# ----------------------------------------------------------------------
# B-spline plumbing (cubic, not-a-knot style knot vector on the sites)
# ----------------------------------------------------------------------


def _knot_vector(sites: np.ndarray) -> np.ndarray:
    if sites.size < 4:
        raise ValueError("cubic spline needs at least 4 points per dimension")
    return np.concatenate([[sites[0]] * 4, sites[2:-2], [sites[-1]] * 4])


def _design_matrix(sites: np.ndarray, t: np.ndarray) -> np.ndarray:
    return BSpline.design_matrix(sites, t, 3).toarray()


def _basis_with_deriv(t: np.ndarray, x: np.ndarray):
    """Nonzero cubic basis values and derivatives at each query point.

    Returns (first_index, values (Q,4), derivs (Q,4)): the four nonzero
    basis functions at x are first_index..first_index+3.
    """
    n_basis = t.size - 4
    j = np.clip(np.searchsorted(t, x, side="right") - 1, 3, n_basis - 1)
    # Cox-de Boor triangle up to degree 3, keeping the degree-2 row
    N = [np.ones_like(x)]
    deg2 = None
    for r in range(1, 4):
        left = [x - t[j + 1 - i] for i in range(1, r + 1)]
        right = [t[j + i] - x for i in range(1, r + 1)]
        saved = np.zeros_like(x)
        new = []
        for k in range(r):
            denom = right[k] + left[r - 1 - k]
            temp = np.where(denom > 0, N[k] / np.where(denom > 0, denom, 1.0), 0.0)
            new.append(saved + right[k] * temp)
            saved = left[r - 1 - k] * temp
        new.append(saved)
        if r == 2:
            deg2 = list(new)
        N = new
    values = np.stack(N, axis=-1)  # (Q, 4), indices j-3..j
    # derivative: N'_{i,3} = 3 * (M_i / (t[i+3]-t[i]) - M_{i+1} / (t[i+4]-t[i+1]))
    # where M is the degree-2 basis; nonzero M indices are j-2..j
    derivs = np.empty_like(values)
    m_ext = [np.zeros_like(x)] + deg2 + [np.zeros_like(x)]  # indices j-3..j+1
    for c in range(4):
        i = j - 3 + c
        d1 = t[i + 3] - t[i]
        d2 = t[i + 4] - t[i + 1]
        term1 = np.where(d1 > 0, m_ext[c] / np.where(d1 > 0, d1, 1.0), 0.0)
        term2 = np.where(d2 > 0, m_ext[c + 1] / np.where(d2 > 0, d2, 1.0), 0.0)
        derivs[:, c] = 3.0 * (term1 - term2)
    return j - 3, values, derivs


def _second_diff(n: int) -> np.ndarray:
    D = np.zeros((n - 2, n))
    for i in range(n - 2):
        D[i, i : i + 3] = (1.0, -2.0, 1.0)
    return D


def _transform(d: str, values):
    return np.log(values) if d in _LOG_DIMS else np.asarray(values, dtype=float)


@dataclass
class SplineSurface:
    """Tensor-product cubic spline over (mu, log sigma, nu, log tau),
    response on the probit scale.  Evaluation clamps out-of-box queries to
    the boundary and reports which queries were clamped."""

    sites: dict                  # transformed coordinates per dimension
    knots_original: dict         # original-scale grid knots (for serialization)
    ranges: dict
    coef: np.ndarray             # coefficient tensor, shape = grid shape
    smoothing: float
    rmse_probit: float
    gcv: float
    mc_draws: int
    prob_clip: float
    _t: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._t:
            self._t = {d: _knot_vector(self.sites[d]) for d in DIMS}

    def _coords(self, mu, sigma, nu, tau):
        raw = {"mu": np.asarray(mu, dtype=float), "sigma": np.asarray(sigma, dtype=float),
               "nu": np.asarray(nu, dtype=float), "tau": np.asarray(tau, dtype=float)}
        coords = {}
        clamped = np.zeros(np.broadcast(*raw.values()).shape, dtype=bool)
        for d in DIMS:
            x = _transform(d, raw[d])
            lo, hi = self.sites[d][0], self.sites[d][-1]
            clamped |= (x < lo) | (x > hi)
            coords[d] = np.clip(x, lo, hi)
        return coords, clamped

    def _gather(self, idx):
        i1, i2, i3, i4 = idx
        off = np.arange(4)
        return self.coef[
            (i1[:, None] + off)[:, :, None, None, None],
            (i2[:, None] + off)[:, None, :, None, None],
            (i3[:, None] + off)[:, None, None, :, None],
            (i4[:, None] + off)[:, None, None, None, :],
        ]

    def eval(self, mu, sigma, nu, tau):
        """Probability at each query; returns (probs, clamped_mask)."""
        coords, clamped = self._coords(mu, sigma, nu, tau)
        idx, vals = [], []
        for d in DIMS:
            i0, v, _ = _basis_with_deriv(self._t[d], np.atleast_1d(coords[d]))
            idx.append(i0)
            vals.append(v)
        patch = self._gather(idx)
        z = np.einsum("qabcd,qa,qb,qc,qd->q", patch, *vals)
        p = ndtr(z)
        if np.isscalar(mu) or np.ndim(mu) == 0:
            return float(p[0]), bool(clamped.ravel()[0])
        return p, clamped

    def eval_with_grad(self, mu, sigma, nu, tau):
        """(probs, {dim: dp/d dim on the original scale}, clamped_mask).

        At clamped queries the gradient is the boundary gradient of the
        spline (the box edge), not zero.
        """
        coords, clamped = self._coords(mu, sigma, nu, tau)
        sigma_arr = np.atleast_1d(np.asarray(sigma, dtype=float))
        tau_arr = np.atleast_1d(np.asarray(tau, dtype=float))
        idx, vals, ders = [], [], []
        for d in DIMS:
            i0, v, dv = _basis_with_deriv(self._t[d], np.atleast_1d(coords[d]))
            idx.append(i0)
            vals.append(v)
            ders.append(dv)
        patch = self._gather(idx)
        z = np.einsum("qabcd,qa,qb,qc,qd->q", patch, *vals)
        phi = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        p = ndtr(z)
        basis = {0: vals[0], 1: vals[1], 2: vals[2], 3: vals[3]}
        grads = {}
        for k, d in enumerate(DIMS):
            rows = [ders[i] if i == k else basis[i] for i in range(4)]
            dz = np.einsum("qabcd,qa,qb,qc,qd->q", patch, *rows)
            g = phi * dz
            if d == "sigma":
                g = g / sigma_arr  # chain rule through log coordinate
            elif d == "tau":
                g = g / tau_arr
            grads[d] = g
        return p, grads, clamped


class ExactSurface:
    """Closed-form event probability behind the surface interface.

    Lets the pseudo-likelihood machinery run with zero approximation
    error, which pins down surface-induced differences in tests.
    """

    mc_draws = 0
    smoothing = 0.0
    rmse_probit = 0.0

    def eval(self, mu, sigma, nu, tau):
        s = np.sinh(np.clip(np.asarray(tau) * np.arcsinh(np.asarray(mu) / sigma) + nu, -700, 700))
        p = ndtr(s)
        clamped = np.zeros(np.shape(p), dtype=bool)
        if np.ndim(mu) == 0:
            return float(p), False
        return p, clamped

    def eval_with_grad(self, mu, sigma, nu, tau):
        mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
        nu, tau = np.asarray(nu, dtype=float), np.asarray(tau, dtype=float)
        a = mu / sigma
        r = np.hypot(1.0, a)
        h = np.arcsinh(a)
        w = np.clip(tau * h + nu, -700, 700)
        s = np.sinh(w)
        p = ndtr(s)
        with np.errstate(over="ignore"):
            dp_dw = np.exp(-0.5 * s * s) / math.sqrt(2.0 * math.pi) * np.cosh(w)
        grads = {
            "mu": dp_dw * tau / (sigma * r),
            "sigma": dp_dw * (-tau * a) / (sigma * r),
            "nu": dp_dw,
            "tau": dp_dw * h,
        }
        return p, grads, np.zeros(np.shape(p), dtype=bool)


def _tensor_apply(tensor: np.ndarray, mats: list) -> np.ndarray:
    """Apply mats[d] along axis d: out = (M0 x M1 x ...) tensor."""
    out = tensor
    for d, M in enumerate(mats):
        out = np.moveaxis(np.tensordot(M, out, axes=(1, d)), 0, d)
    return out


def fit_surface(grid: MomentGrid, probabilities, smoothing=None, *, prob_clip=None) -> SplineSurface:
    """Penalized tensor-spline fit of probit-transformed estimates.

    smoothing=None selects the penalty by generalized cross-validation
    over a log-spaced ladder; a float pins it.
    """
    shape = grid.shape
    if any(n < 4 for n in shape):
        raise ValueError("singular fit: need at least 4 points per dimension")
    probs = np.asarray(probabilities, dtype=float).reshape(shape)
    if prob_clip is None:
        prob_clip = 1.0 / (2.0 * grid.mc_draws) if grid.mc_draws else 1e-5
    P = ndtri(np.clip(probs, prob_clip, 1.0 - prob_clip))

    sites = {d: _transform(d, grid.knots[d]) for d in DIMS}
    U, theta, Binv = [], [], []
    for d in DIMS:
        t = _knot_vector(sites[d])
        B = _design_matrix(sites[d], t)
        M = _second_diff(B.shape[0]) @ np.linalg.inv(B)
        S = M.T @ M
        lam, vec = np.linalg.eigh(0.5 * (S + S.T))
        U.append(vec)
        theta.append(np.maximum(lam, 0.0))
        Binv.append(np.linalg.inv(B))

    theta_sum = (
        theta[0][:, None, None, None]
        + theta[1][None, :, None, None]
        + theta[2][None, None, :, None]
        + theta[3][None, None, None, :]
    )
    P_tilde = _tensor_apply(P, [u.T for u in U])
    n = P.size

    def solve(lam):
        denom = 1.0 + lam * theta_sum
        f_tilde = P_tilde / denom
        rss = float(np.sum((P_tilde - f_tilde) ** 2))
        edf = float(np.sum(1.0 / denom))
        return f_tilde, rss, edf

    if smoothing is None:
        best = None
        for lam in np.logspace(-6, 2, 17):
            _, rss, edf = solve(lam)
            if edf >= n - 1e-9:
                gcv = np.inf if rss == 0 else rss * n  # interpolation: no residual df
            else:
                gcv = n * rss / (n - edf) ** 2
            if best is None or gcv < best[1]:
                best = (lam, gcv)
        lam, gcv = best
    else:
        lam = float(smoothing)
        gcv = math.nan
    f_tilde, rss, edf = solve(lam)
    if smoothing is not None:
        gcv = n * rss / max(n - edf, 1e-9) ** 2
    F = _tensor_apply(f_tilde, U)
    coef = _tensor_apply(F, Binv)
    rmse = math.sqrt(float(np.mean((F - P) ** 2)))
    return SplineSurface(
        sites=sites,
        knots_original={d: np.asarray(grid.knots[d], dtype=float) for d in DIMS},
        ranges=dict(grid.ranges),
        coef=coef,
        smoothing=float(lam),
        rmse_probit=rmse,
        gcv=float(gcv),
        mc_draws=grid.mc_draws,
        prob_clip=float(prob_clip),
    )


def surface_eval(surface, p: SasParams) -> float:
    """Probability at one parameter quadruple."""
    val, _ = surface.eval(p.mu, p.sigma, p.nu, p.tau)
    return float(val)


def surface_grad(surface, p: SasParams) -> np.ndarray:
    """(d/dmu, d/dsigma, d/dnu, d/dtau) of the surface probability."""
    _, grads, _ = surface.eval_with_grad(
        np.array([p.mu]), np.array([p.sigma]), np.array([p.nu]), np.array([p.tau])
    )
    return np.array([float(grads[d][0]) for d in DIMS])


def pseudo_log_likelihood(data: PanelData, table: ParamTable, surface) -> float:
    """Bernoulli objective with surface probabilities in place of the CDF."""
    p, _ = surface.eval(table.mu, table.sigma, table.nu, table.tau)
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = data.y
    return float(np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))


def quad_fit(data, spec, prior, surface, cfg):
    """HMC on the surface-based pseudo-posterior (same machinery as the
    exact model; gradients flow through the spline)."""
    from .bayes import hmc_run

    return hmc_run(data, spec, prior, cfg, surface=surface)


def save_surface(surface: SplineSurface, path) -> None:
    """Versioned text artifact: magic line, JSON header, coefficients."""
    header = {
        "ranges": {d: list(map(float, surface.ranges[d])) for d in DIMS},
        "knots": {d: [repr(float(v)) for v in surface.knots_original[d]] for d in DIMS},
        "smoothing": surface.smoothing,
        "rmse_probit": surface.rmse_probit,
        "gcv": surface.gcv,
        "mc_draws": surface.mc_draws,
        "prob_clip": surface.prob_clip,
        "shape": list(surface.coef.shape),
    }
    buf = io.StringIO()
    buf.write(f"{_MAGIC} {_VERSION}\n")
    buf.write(json.dumps(header, sort_keys=True) + "\n")
    for v in surface.coef.ravel():
        buf.write(repr(float(v)) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_surface(path) -> SplineSurface:
    with open(path) as fh:
        magic = fh.readline().split()
        if len(magic) != 2 or magic[0] != _MAGIC:
            raise ValueError(f"{path} is not a surface artifact")
        if int(magic[1]) != _VERSION:
            raise ValueError(f"unsupported surface version {magic[1]}")
        header = json.loads(fh.readline())
        coef = np.array([float(line) for line in fh])
    knots = {d: np.array([float(v) for v in header["knots"][d]]) for d in DIMS}
    shape = tuple(header["shape"])
    return SplineSurface(
        sites={d: _transform(d, knots[d]) for d in DIMS},
        knots_original=knots,
        ranges={d: tuple(header["ranges"][d]) for d in DIMS},
        coef=coef.reshape(shape),
        smoothing=header["smoothing"],
        rmse_probit=header["rmse_probit"],
        gcv=header["gcv"],
        mc_draws=header["mc_draws"],
        prob_clip=header["prob_clip"],
    )
