"""Synthetic cohorts with analytically known conditional laws.

Longitudinal variables follow a multivariate Ornstein-Uhlenbeck process with a
context-dependent stationary mean and correlated Brownian increments, sampled
with the exact transition density. Event times follow a Weibull accelerated
failure time model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import TTE, PatientRecord, Schema, Visit


@dataclass
class OUSpec:
    theta: np.ndarray  # (N,) mean-reversion rates
    sigma: np.ndarray  # (N,) diffusion scales
    mean_weight: np.ndarray  # (N, C) stationary mean = mean_weight @ c + mean_bias
    mean_bias: np.ndarray  # (N,)
    corr: np.ndarray  # (N, N) Brownian increment correlation
    schedules: list[list[float]] = field(default_factory=lambda: [[0.0, 1.0, 2.0, 4.0, 8.0]])
    missing_rate: float = 0.0
    context_missing_rate: float = 0.0

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        n = self.theta.size
        self.mean_weight = np.asarray(self.mean_weight, dtype=np.float64).reshape(n, -1)
        self.mean_bias = np.broadcast_to(np.asarray(self.mean_bias, dtype=np.float64), (n,)).copy()
        self.corr = np.asarray(self.corr, dtype=np.float64).reshape(n, n)
        if np.any(self.theta <= 0) or np.any(self.sigma <= 0):
            raise ValueError("theta and sigma must be positive")
        if not np.allclose(self.corr, self.corr.T) or not np.allclose(np.diag(self.corr), 1.0):
            raise ValueError("corr must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(self.corr).min() <= 0:
            raise ValueError("corr must be positive definite")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        for grid in self.schedules:
            if grid[0] != 0 or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("each schedule must start at 0 and be strictly increasing")

    @property
    def N(self) -> int:
        return self.theta.size

    @property
    def C(self) -> int:
        return self.mean_weight.shape[1]

    def stationary_mean(self, c) -> np.ndarray:
        return self.mean_weight @ np.asarray(c, dtype=np.float64) + self.mean_bias

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(), "sigma": self.sigma.tolist(),
            "mean_weight": self.mean_weight.tolist(), "mean_bias": self.mean_bias.tolist(),
            "corr": self.corr.tolist(), "schedules": [list(map(float, g)) for g in self.schedules],
            "missing_rate": self.missing_rate, "context_missing_rate": self.context_missing_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OUSpec":
        return cls(**d)


@dataclass
class TTESpec:
    coef: np.ndarray  # (C,) log-scale coefficients
    intercept: float = 0.0
    kappa: float = 2.0  # Weibull shape; log-time scale is 1/kappa
    censor_mean: float | None = None  # exponential censoring; None = no random censoring
    admin_censor: float | None = None  # fixed administrative censoring time

    def __post_init__(self):
        self.coef = np.atleast_1d(np.asarray(self.coef, dtype=np.float64))
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    def log_scale(self, c) -> float:
        return float(self.coef @ np.asarray(c, dtype=np.float64) + self.intercept)

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "intercept": self.intercept, "kappa": self.kappa,
                "censor_mean": self.censor_mean, "admin_censor": self.admin_censor}

    @classmethod
    def from_dict(cls, d: dict) -> "TTESpec":
        return cls(**d)


def ou_transition_cov(spec: OUSpec, dt: float) -> np.ndarray:
    """Covariance of X(t + dt) given X(t) for the correlated OU process."""
    th = spec.theta[:, None] + spec.theta[None, :]
    ss = spec.sigma[:, None] * spec.sigma[None, :] * spec.corr
    if math.isinf(dt):
        return ss / th
    return ss / th * -np.expm1(-th * dt)


def ou_conditional_moments(spec: OUSpec, c, y_cur, dt: float):
    """Per-dimension mean and variance of y(t + dt) given y(t) = y_cur."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    mu = spec.stationary_mean(c)
    decay = np.exp(-spec.theta * dt)
    mean = mu + (np.asarray(y_cur, dtype=np.float64) - mu) * decay
    var = spec.sigma**2 / (2 * spec.theta) * (-np.expm1(-2 * spec.theta * dt)) if math.isfinite(dt) \
        else spec.sigma**2 / (2 * spec.theta)
    return mean, var


def _chol(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def ou_step(spec: OUSpec, c, y_cur, dt: float, rng: np.random.Generator) -> np.ndarray:
    mean, _ = ou_conditional_moments(spec, c, y_cur, dt)
    return mean + _chol(ou_transition_cov(spec, dt)) @ rng.standard_normal(spec.N)


def _patient_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_tte(spec: TTESpec, c, rng: np.random.Generator) -> TTE:
    """Weibull AFT draw: log T = a(c) + g / kappa with g a standard minimum-Gumbel variate."""
    g = math.log(rng.standard_exponential())
    t = math.exp(spec.log_scale(c) + (g / spec.kappa if math.isfinite(spec.kappa) else 0.0))
    censor = math.inf
    if spec.censor_mean is not None:
        censor = rng.standard_exponential() * spec.censor_mean if spec.censor_mean > 0 else 0.0
    if spec.admin_censor is not None:
        censor = min(censor, spec.admin_censor)
    if t <= censor:
        return TTE(t, True)
    return TTE(censor, False)


def gen_cohort(
    spec: OUSpec,
    n_patients: int,
    seed: int,
    tte: dict[str, TTESpec] | None = None,
    n_noise_context: int = 0,
) -> list[PatientRecord]:
    """Simulate ``n_patients`` records; each patient owns an independent seed stream.

    Context is i.i.d. standard normal: the first ``spec.C`` columns drive the
    stationary mean, ``n_noise_context`` further columns are pure noise.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    tte = tte or {}
    stat_chol = _chol(ou_transition_cov(spec, math.inf))
    width = len(str(n_patients))
    records = []
    for i, rng in enumerate(_patient_rngs(seed, n_patients)):
        c_full = rng.standard_normal(spec.C + n_noise_context)
        c = c_full[: spec.C]
        grid = spec.schedules[rng.integers(len(spec.schedules))]
        y = spec.stationary_mean(c) + stat_chol @ rng.standard_normal(spec.N)
        visits = []
        prev_t = 0.0
        for t in grid:
            if t > prev_t:
                y = ou_step(spec, c, y, t - prev_t, rng)
            mask = rng.random(spec.N) >= spec.missing_rate
            visits.append(Visit(float(t), y.copy(), mask))
            prev_t = t
        c_mask = rng.random(c_full.size) >= spec.context_missing_rate
        events = {name: gen_tte(ts, c, rng) for name, ts in tte.items()}
        records.append(PatientRecord(f"P{i:0{width}d}", c_full, c_mask, visits, events))
    return records


def cohort_schema(spec: OUSpec, n_noise_context: int = 0, tte_outcomes=()) -> Schema:
    return Schema.simple(
        [f"y{j}" for j in range(spec.N)],
        [f"c{j}" for j in range(spec.C)] + [f"noise{j}" for j in range(n_noise_context)],
        tte_outcomes,
    )


def ou_1d(missing_rate: float = 0.1, schedules=None) -> OUSpec:
    """theta = 1, sigma = sqrt(2) (unit stationary variance), stationary mean equal to the context."""
    return OUSpec(
        theta=[1.0], sigma=[math.sqrt(2.0)], mean_weight=[[1.0]], mean_bias=[0.0], corr=[[1.0]],
        schedules=schedules or [[0.0, 1.0, 2.0, 4.0, 8.0]], missing_rate=missing_rate,
    )


def ou_correlated(n: int = 3, rho: float = 0.6, missing_rate: float = 0.1, schedules=None) -> OUSpec:
    corr = np.full((n, n), rho)
    np.fill_diagonal(corr, 1.0)
    return OUSpec(
        theta=np.ones(n), sigma=np.full(n, math.sqrt(2.0)), mean_weight=np.eye(n), mean_bias=np.zeros(n),
        corr=corr, schedules=schedules or [[0.0, 1.0, 2.0, 4.0, 8.0]], missing_rate=missing_rate,
    )
