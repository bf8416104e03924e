"""Scoring: discrimination, calibration, probabilistic accuracy, recovery."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit
from scipy.stats import rankdata

__all__ = [
    "MetricSet",
    "MomentRecovery",
    "auc",
    "brier",
    "calibration",
    "log_loss",
    "moment_recovery",
]

_PROB_EPS = 1e-12
_LL_EPS = 1e-14


@dataclass
class MetricSet:
    auc: float
    brier: float
    calibration_slope: float
    calibration_intercept: float
    log_loss: float
    recovery: dict | None = None

    def as_dict(self) -> dict:
        out = {
            "auc": self.auc,
            "brier": self.brier,
            "calibration_slope": self.calibration_slope,
            "calibration_intercept": self.calibration_intercept,
            "log_loss": self.log_loss,
        }
        if self.recovery:
            for m, rec in self.recovery.items():
                out[f"bias_{m}"] = rec.bias
                out[f"rmse_{m}"] = rec.rmse
                out[f"coverage_{m}"] = rec.coverage
        return out


@dataclass
class MomentRecovery:
    bias: float
    rmse: float
    coverage: float  # percent of truths inside the 95% intervals


def _validate(probs, outcomes):
    probs = np.asarray(probs, dtype=float)
    outcomes = np.asarray(outcomes)
    if probs.shape != outcomes.shape:
        raise ValueError("probabilities and outcomes must align")
    if not np.isin(outcomes, (0, 1)).all():
        raise ValueError("outcomes must be binary")
    return probs, outcomes.astype(int)


def auc(probs, outcomes) -> float:
    """Probability a positive outranks a negative; ties get half credit.

    Computed from rank sums (equivalent to all-pairs counting).  Returns
    nan when only one class is present.
    """
    probs, outcomes = _validate(probs, outcomes)
    n_pos = int(outcomes.sum())
    n_neg = outcomes.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(probs)
    u = ranks[outcomes == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def brier(probs, outcomes) -> float:
    """Mean squared error between probability and outcome."""
    probs, outcomes = _validate(probs, outcomes)
    if (probs < 0).any() or (probs > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    return float(np.mean((probs - outcomes) ** 2))


def log_loss(probs, outcomes) -> float:
    """Mean negative Bernoulli log likelihood, probabilities clamped."""
    probs, outcomes = _validate(probs, outcomes)
    p = np.clip(probs, _LL_EPS, 1.0 - _LL_EPS)
    return float(-np.mean(outcomes * np.log(p) + (1 - outcomes) * np.log1p(-p)))


def calibration(probs, outcomes, *, tol=1e-10, max_iter=60):
    """Logistic recalibration: regress outcomes on logit(probs).

    Slope 1 / intercept 0 is perfect calibration.  Returns (nan, nan) when
    the 2-parameter fit separates or fails to converge, or when only one
    outcome class is present.
    """
    probs, outcomes = _validate(probs, outcomes)
    if outcomes.min() == outcomes.max():
        return math.nan, math.nan
    x = logit(np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS))
    X = np.column_stack([np.ones_like(x), x])
    beta = np.array([0.0, 1.0])
    for _ in range(max_iter):
        eta = X @ beta
        p = expit(eta)
        w = np.maximum(p * (1 - p), 1e-12)
        z = eta + (outcomes - p) / w
        try:
            beta_new = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * z))
        except np.linalg.LinAlgError:
            return math.nan, math.nan
        if not np.isfinite(beta_new).all() or np.abs(beta_new).max() > 40.0:
            return math.nan, math.nan
        if np.abs(beta_new - beta).max() < tol:
            return float(beta_new[1]), float(beta_new[0])
        beta = beta_new
    return math.nan, math.nan


def moment_recovery(estimates: dict, truth: dict) -> dict:
    """Per-moment bias, rmse and 95% interval coverage.

    estimates maps moment name to (mean, lower, upper) arrays aligned with
    the truth arrays observation by observation.
    """
    out = {}
    for m, (mean, lo, hi) in estimates.items():
        if m not in truth:
            raise KeyError(f"truth table has no moment {m!r}")
        t = np.asarray(truth[m], dtype=float)
        mean = np.asarray(mean, dtype=float)
        if mean.shape != t.shape:
            raise ValueError(f"estimate/truth misalignment for {m!r}")
        covered = (t >= np.asarray(lo)) & (t <= np.asarray(hi))
        out[m] = MomentRecovery(
            bias=float(np.mean(mean - t)),
            rmse=float(np.sqrt(np.mean((mean - t) ** 2))),
            coverage=float(100.0 * np.mean(covered)),
        )
    return out
