"""Hamiltonian Monte Carlo with dual-averaging step-size adaptation.

Static-trajectory HMC with a jittered number of leapfrog steps, diagonal
mass-matrix estimation over doubling warmup windows, and chain-level
convergence diagnostics (split R-hat, effective sample size).  The target
is supplied as a callable returning (log density, gradient); everything is
deterministic given the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SamplerConfig",
    "SamplerError",
    "HmcResult",
    "hmc_sample",
    "split_rhat",
    "effective_sample_size",
    "diagnostics",
]

_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


class SamplerError(RuntimeError):
    """Raised when sampling fails (e.g. too many divergent transitions)."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 2000
    warmup: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 32      # static scheme: steps drawn uniform on [1, max]
    seed: int = 0
    init_jitter: float = 0.5
    divergence_threshold: float = 1000.0
    max_divergence_rate: float = 0.10
    algorithm: str = "nuts"     # "nuts" (adaptive trajectories) or "static"
    max_tree_depth: int = 10

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_leapfrog < 1:
            raise ValueError("max_leapfrog must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.algorithm not in ("nuts", "static"):
            raise ValueError("algorithm must be 'nuts' or 'static'")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass
class HmcResult:
    draws: np.ndarray        # (chains, kept, dim)
    logp: np.ndarray         # (chains, kept)
    divergences: int         # post-warmup, all chains
    accept_rate: float       # post-warmup mean acceptance probability
    step_sizes: np.ndarray   # final step size per chain
    inv_mass: np.ndarray     # (chains, dim) adapted inverse mass diagonals


def _leapfrog(logp_grad, x, p, eps, n_steps, inv_mass):
    """Integrate the trajectory; returns (x, p, logp, grad) or None on blowup."""
    value, grad = logp_grad(x)
    if not np.isfinite(value):
        return None
    p = p + 0.5 * eps * grad
    for step in range(n_steps):
        x = x + eps * inv_mass * p
        value, grad = logp_grad(x)
        if not (np.isfinite(value) and np.isfinite(grad).all()):
            return None
        p = p + (eps if step < n_steps - 1 else 0.5 * eps) * grad
    return x, p, value, grad


def _kinetic(p, inv_mass):
    return 0.5 * float(np.sum(p * p * inv_mass))


def _find_initial_step(logp_grad, x, rng, inv_mass):
    """Double/halve the step size until the one-step accept ratio crosses 1/2."""
    eps = 1.0
    value0, _ = logp_grad(x)
    if not np.isfinite(value0):
        return 0.1
    p0 = rng.standard_normal(x.size) / np.sqrt(inv_mass)
    h0 = -value0 + _kinetic(p0, inv_mass)

    def log_ratio(eps):
        out = _leapfrog(logp_grad, x, p0.copy(), eps, 1, inv_mass)
        if out is None:
            return -np.inf
        x1, p1, v1, _ = out
        return -(-v1 + _kinetic(p1, inv_mass)) + h0

    direction = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(60):
        if direction * log_ratio(eps) <= direction * math.log(0.5):
            break
        eps *= 2.0**direction
    return eps


def _uturn(xm, xp, pm, pp, inv_mass):
    dx = xp - xm
    return float(dx @ (inv_mass * pm)) < 0.0 or float(dx @ (inv_mass * pp)) < 0.0


class _NutsTransition:
    """One multinomial no-U-turn update (recursive doubling)."""

    def __init__(self, logp_grad, eps, inv_mass, rng, max_depth, div_threshold):
        self.logp_grad = logp_grad
        self.eps = eps
        self.inv_mass = inv_mass
        self.rng = rng
        self.max_depth = max_depth
        self.div_threshold = div_threshold
        self.divergent = False
        self.accept_sum = 0.0
        self.n_leaves = 0

    def _leapfrog_one(self, x, p, grad, direction):
        e = direction * self.eps
        p1 = p + 0.5 * e * grad
        x1 = x + e * self.inv_mass * p1
        v1, g1 = self.logp_grad(x1)
        if not (np.isfinite(v1) and np.isfinite(g1).all()):
            return None
        return x1, p1 + 0.5 * e * g1, v1, g1

    def _build(self, x, p, grad, direction, depth):
        """Returns (tree dict, ok). ok=False stops expansion; tree may be None."""
        if depth == 0:
            self.n_leaves += 1
            out = self._leapfrog_one(x, p, grad, direction)
            if out is None:
                self.divergent = True
                return None, False
            x1, p1, v1, g1 = out
            delta = (-v1 + _kinetic(p1, self.inv_mass)) - self.h0
            if not math.isfinite(delta) or delta > self.div_threshold:
                self.divergent = True
                return None, False
            self.accept_sum += 1.0 if delta <= 0 else math.exp(-delta)
            tree = {
                "xm": x1, "pm": p1, "gm": g1,
                "xp": x1, "pp": p1, "gp": g1,
                "xprop": x1, "vprop": v1, "gprop": g1,
                "logw": -delta,
            }
            return tree, True
        left, ok = self._build(x, p, grad, direction, depth - 1)
        if not ok:
            return None, False
        if direction == 1:
            right, ok = self._build(left["xp"], left["pp"], left["gp"], direction, depth - 1)
        else:
            right, ok = self._build(left["xm"], left["pm"], left["gm"], direction, depth - 1)
        if not ok:
            return None, False
        logw = np.logaddexp(left["logw"], right["logw"])
        pick = right if math.log(self.rng.uniform()) < right["logw"] - logw else left
        if direction == 1:
            tree = {
                "xm": left["xm"], "pm": left["pm"], "gm": left["gm"],
                "xp": right["xp"], "pp": right["pp"], "gp": right["gp"],
            }
        else:
            tree = {
                "xm": right["xm"], "pm": right["pm"], "gm": right["gm"],
                "xp": left["xp"], "pp": left["pp"], "gp": left["gp"],
            }
        tree.update(xprop=pick["xprop"], vprop=pick["vprop"], gprop=pick["gprop"], logw=logw)
        if _uturn(tree["xm"], tree["xp"], tree["pm"], tree["pp"], self.inv_mass):
            return tree, False
        return tree, True

    def run(self, x, value, grad):
        dim = x.size
        p0 = self.rng.standard_normal(dim) / np.sqrt(self.inv_mass)
        self.h0 = -value + _kinetic(p0, self.inv_mass)
        tree = {
            "xm": x, "pm": p0, "gm": grad,
            "xp": x, "pp": p0, "gp": grad,
            "xprop": x, "vprop": value, "gprop": grad,
            "logw": 0.0,
        }
        for depth in range(self.max_depth):
            direction = 1 if self.rng.uniform() < 0.5 else -1
            if direction == 1:
                sub, ok = self._build(tree["xp"], tree["pp"], tree["gp"], direction, depth)
            else:
                sub, ok = self._build(tree["xm"], tree["pm"], tree["gm"], direction, depth)
            if not ok:
                break  # divergent or internally u-turned subtree: discard it
            # biased progressive sampling toward the new subtree
            if math.log(self.rng.uniform()) < sub["logw"] - tree["logw"]:
                tree["xprop"], tree["vprop"], tree["gprop"] = (
                    sub["xprop"], sub["vprop"], sub["gprop"],
                )
            tree["logw"] = np.logaddexp(tree["logw"], sub["logw"])
            if direction == 1:
                tree["xp"], tree["pp"], tree["gp"] = sub["xp"], sub["pp"], sub["gp"]
            else:
                tree["xm"], tree["pm"], tree["gm"] = sub["xm"], sub["pm"], sub["gm"]
            if _uturn(tree["xm"], tree["xp"], tree["pm"], tree["pp"], self.inv_mass):
                break
        accept_prob = self.accept_sum / max(self.n_leaves, 1)
        return tree["xprop"], tree["vprop"], tree["gprop"], accept_prob, self.divergent


def _warmup_schedule(warmup):
    """(init_buffer, mass window boundaries, term_buffer start) Stan-style."""
    if warmup < 20:
        return warmup, [], warmup
    init_buffer, term_buffer, base_window = 75, 50, 25
    if init_buffer + term_buffer + base_window > warmup:
        scale = warmup / (init_buffer + term_buffer + base_window)
        init_buffer = int(init_buffer * scale)
        term_buffer = int(term_buffer * scale)
        base_window = warmup - init_buffer - term_buffer
    boundaries = []
    start, size = init_buffer, base_window
    while start + size < warmup - term_buffer:
        boundaries.append(start + size)
        start += size
        size *= 2
    boundaries.append(warmup - term_buffer)
    return init_buffer, boundaries, warmup - term_buffer


class _DualAveraging:
    def __init__(self, eps0, target):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_prob):
        self.count += 1
        t = self.count
        frac = 1.0 / (t + _DA_T0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(t) / _DA_GAMMA * self.h_bar
        w = t**-_DA_KAPPA
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar

    @property
    def eps(self):
        return math.exp(self.log_eps)

    @property
    def eps_smoothed(self):
        return math.exp(self.log_eps_bar)


def _run_chain(logp_grad, x0, cfg: SamplerConfig, rng):
    dim = x0.size
    kept = cfg.iterations - cfg.warmup
    draws = np.empty((kept, dim))
    logps = np.empty(kept)
    inv_mass = np.ones(dim)

    eps = _find_initial_step(logp_grad, x0, rng, inv_mass)
    da = _DualAveraging(eps, cfg.target_accept)
    init_buffer, mass_updates, _ = _warmup_schedule(cfg.warmup)
    mass_updates = set(mass_updates)

    welford_n = 0
    welford_mean = np.zeros(dim)
    welford_m2 = np.zeros(dim)

    x = x0.copy()
    value, grad = logp_grad(x)
    divergences = 0
    accept_sum = 0.0

    for it in range(cfg.iterations):
        in_warmup = it < cfg.warmup
        if cfg.algorithm == "nuts":
            trans = _NutsTransition(
                logp_grad, eps, inv_mass, rng, cfg.max_tree_depth, cfg.divergence_threshold
            )
            x, value, grad, accept_prob, divergent = trans.run(x, value, grad)
        else:
            p = rng.standard_normal(dim) / np.sqrt(inv_mass)
            h0 = -value + _kinetic(p, inv_mass)
            n_steps = int(rng.integers(1, cfg.max_leapfrog + 1))
            out = _leapfrog(logp_grad, x, p, eps, n_steps, inv_mass)
            divergent = out is None
            if not divergent:
                x_new, p_new, value_new, _ = out
                h1 = -value_new + _kinetic(p_new, inv_mass)
                energy_error = h1 - h0
                divergent = not math.isfinite(energy_error) or abs(energy_error) > cfg.divergence_threshold
            if divergent:
                accept_prob = 0.0
            else:
                accept_prob = min(1.0, math.exp(min(0.0, -energy_error)))
                if math.log(rng.uniform()) < -energy_error:
                    x, value = x_new, value_new

        if in_warmup:
            da.update(accept_prob)
            eps = da.eps
            if it >= init_buffer:
                welford_n += 1
                delta = x - welford_mean
                welford_mean += delta / welford_n
                welford_m2 += delta * (x - welford_mean)
                if (it + 1) in mass_updates and welford_n >= 5:
                    var = welford_m2 / (welford_n - 1)
                    inv_mass = var * (welford_n / (welford_n + 5.0)) + 1e-3 * (5.0 / (welford_n + 5.0))
                    welford_n = 0
                    welford_mean[:] = 0.0
                    welford_m2[:] = 0.0
                    eps = _find_initial_step(logp_grad, x, rng, inv_mass)
                    da = _DualAveraging(eps, cfg.target_accept)
            if it == cfg.warmup - 1:
                eps = da.eps_smoothed
        else:
            if divergent:
                divergences += 1
            accept_sum += accept_prob
            k = it - cfg.warmup
            draws[k] = x
            logps[k] = value

    return draws, logps, divergences, accept_sum / kept, eps, inv_mass


def hmc_sample(logp_grad, dim: int, cfg: SamplerConfig, *, x0=None) -> HmcResult:
    """Sample a target given by ``logp_grad(x) -> (logp, grad)``.

    x0 may be a (dim,) vector shared by all chains or a (chains, dim)
    array; by default chains start at uniform(-init_jitter, init_jitter)
    draws.  Raises SamplerError when more than ``max_divergence_rate`` of
    the post-warmup transitions diverge.
    """
    kept = cfg.iterations - cfg.warmup
    all_draws = np.empty((cfg.chains, kept, dim))
    all_logp = np.empty((cfg.chains, kept))
    step_sizes = np.empty(cfg.chains)
    inv_masses = np.empty((cfg.chains, dim))
    divergences = 0
    accept = 0.0

    for c in range(cfg.chains):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, c)))
        if x0 is None:
            start = rng.uniform(-cfg.init_jitter, cfg.init_jitter, dim)
        else:
            x0_arr = np.asarray(x0, dtype=float)
            start = x0_arr[c].copy() if x0_arr.ndim == 2 else x0_arr.copy()
        draws, logps, div, acc, eps, inv_mass = _run_chain(logp_grad, start, cfg, rng)
        all_draws[c] = draws
        all_logp[c] = logps
        divergences += div
        accept += acc
        step_sizes[c] = eps
        inv_masses[c] = inv_mass

    total = cfg.chains * kept
    if divergences > cfg.max_divergence_rate * total:
        raise SamplerError(
            f"{divergences} of {total} post-warmup transitions diverged "
            f"(> {cfg.max_divergence_rate:.0%}); the posterior geometry needs attention"
        )
    return HmcResult(
        draws=all_draws,
        logp=all_logp,
        divergences=divergences,
        accept_rate=accept / cfg.chains,
        step_sizes=step_sizes,
        inv_mass=inv_masses,
    )


def _split_chains(draws: np.ndarray) -> np.ndarray:
    """(chains, n, ...) -> (2*chains, n//2, ...), dropping an odd tail draw."""
    chains, n = draws.shape[:2]
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain for split diagnostics")
    first = draws[:, :half]
    second = draws[:, half : 2 * half]
    return np.concatenate([first, second], axis=0)


def split_rhat(draws: np.ndarray) -> np.ndarray:
    """Split potential-scale-reduction factor per parameter.

    draws has shape (chains, n, dim); values near 1 indicate mixing.
    """
    if draws.shape[0] < 2:
        raise ValueError("split R-hat needs at least 2 chains")
    seqs = _split_chains(draws)
    m, n = seqs.shape[:2]
    means = seqs.mean(axis=1)
    w = seqs.var(axis=1, ddof=1).mean(axis=0)
    b_over_n = means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b_over_n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(var_plus / w)
    return np.where(w > 0, out, 1.0)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row (FFT), lags 0..n-1."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(draws: np.ndarray) -> np.ndarray:
    """ESS per parameter from split chains (Geyer initial monotone sequence)."""
    seqs = _split_chains(draws)
    m, n, dim = seqs.shape
    ess = np.empty(dim)
    for j in range(dim):
        x = seqs[:, :, j]
        acov = _autocovariance(x)
        chain_var = acov[:, 0] * n / (n - 1.0)
        w = chain_var.mean()
        mean_acov = acov.mean(axis=0)
        var_plus = w * (n - 1.0) / n + x.mean(axis=1).var(ddof=1) if m > 1 else w
        if var_plus <= 0 or w <= 0:
            ess[j] = m * n
            continue
        rho = 1.0 - (w - mean_acov) / var_plus
        # Geyer: sum consecutive pairs while positive, forced non-increasing
        max_pairs = (n - 1) // 2
        tau = 1.0  # accounts for rho_0 = 1 via the first pair below
        prev = np.inf
        total = 0.0
        for k in range(max_pairs):
            pair = rho[2 * k] + rho[2 * k + 1]
            if pair <= 0:
                break
            pair = min(pair, prev)
            total += pair
            prev = pair
        tau = max(2.0 * total - 1.0, 1.0 / (m * n))
        ess[j] = m * n / tau
    return ess


@dataclass
class DiagnosticsReport:
    rhat: np.ndarray
    ess: np.ndarray
    flagged: list

    def max_rhat(self) -> float:
        return float(np.max(self.rhat))


def diagnostics(draws: np.ndarray, names=None, *, rhat_threshold=1.05) -> DiagnosticsReport:
    """Per-parameter split R-hat and ESS; flags parameters above threshold."""
    rhat = split_rhat(draws)
    ess = effective_sample_size(draws)
    idx = np.flatnonzero(rhat > rhat_threshold)
    flagged = [names[i] if names is not None else int(i) for i in idx]
    return DiagnosticsReport(rhat=rhat, ess=ess, flagged=flagged)
