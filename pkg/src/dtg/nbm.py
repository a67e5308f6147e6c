"""Energies, exact block-Gibbs conditionals and autoregressive twin generation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .datamodel import Normalizer, PatientRecord, Schema
from .diffcore import DEFAULT_DTYPE, logcosh
from .networks import NBMModel

ROLLOUT = "rollout"
DIRECT = "direct"
DEFAULT_GIBBS_STEPS = 16


@dataclass
class EnergyContext:
    """Network outputs at one (x, t_cur, t_fut): mean f (B, N), diagonal precision P (B, N), couplings W (B, N, M)."""

    f: torch.Tensor
    P: torch.Tensor
    W: torch.Tensor

    def detach(self) -> "EnergyContext":
        return EnergyContext(self.f.detach(), self.P.detach(), self.W.detach())

    @classmethod
    def single(cls, f, P, W) -> "EnergyContext":
        """Build an unbatched context from plain arrays (N,), (N,), (N, M)."""
        f = torch.as_tensor(np.asarray(f, dtype=np.float64)).reshape(1, -1)
        P = torch.as_tensor(np.asarray(P, dtype=np.float64)).reshape(1, -1)
        W = torch.as_tensor(np.asarray(W, dtype=np.float64)).reshape(1, f.shape[1], -1)
        if torch.any(P <= 0):
            raise ValueError("precision must be strictly positive")
        return cls(f, P, W)

    def repeat(self, n: int) -> "EnergyContext":
        return EnergyContext(self.f.repeat(n, 1), self.P.repeat(n, 1), self.W.repeat(n, 1, 1))


def energy_context(model: NBMModel, y0, c, y_cur, t_cur, t_fut) -> EnergyContext:
    """Inputs must already be imputed."""
    x = torch.cat([y_cur, c], dim=-1)
    return EnergyContext(
        model.mean_f(y0, c, y_cur, t_cur, t_fut),
        model.precision_P(x, t_cur, t_fut),
        model.weights_W(x, t_cur, t_fut),
    )


def _check_ising(h: torch.Tensor) -> None:
    if not torch.all((h == 1) | (h == -1)):
        raise ValueError("hidden units must take values in {-1, +1}")


def joint_energy(ctx: EnergyContext, y, h) -> torch.Tensor:
    """Per-row U(y, h | x) = 0.5 r^T P r - r^T W h with r = y - f (hidden bias fixed at zero)."""
    _check_ising(h)
    r = y - ctx.f
    return 0.5 * (ctx.P * r * r).sum(-1) - torch.einsum("bn,bnm,bm->b", r, ctx.W, h)


def marginal_energy(ctx: EnergyContext, y) -> torch.Tensor:
    """Per-row U(y | x) = 0.5 r^T P r - sum_i log cosh([W^T r]_i)."""
    r = y - ctx.f
    return 0.5 * (ctx.P * r * r).sum(-1) - logcosh(torch.einsum("bn,bnm->bm", r, ctx.W)).sum(-1)


def _draw(rng, method: str, shape) -> torch.Tensor:
    return torch.as_tensor(getattr(rng, method)(shape), dtype=DEFAULT_DTYPE)


def sample_h_given_y(ctx: EnergyContext, y, rng) -> torch.Tensor:
    """Independent Ising units with P(h_i = +1) = logistic(2 [W^T (y - f)]_i)."""
    a = torch.einsum("bn,bnm->bm", y - ctx.f, ctx.W)
    u = _draw(rng, "random", tuple(a.shape))
    return torch.where(u < torch.sigmoid(2.0 * a), 1.0, -1.0).to(a.dtype)


def sample_y_given_h(ctx: EnergyContext, h, rng) -> torch.Tensor:
    """Gaussian with mean f + P^{-1} W h and covariance diag(1/P)."""
    mean = ctx.f + torch.einsum("bnm,bm->bn", ctx.W, h) / ctx.P
    z = _draw(rng, "standard_normal", tuple(mean.shape))
    return mean + z / torch.sqrt(ctx.P)


@torch.no_grad()
def gibbs_sample(ctx: EnergyContext, k: int, rng) -> torch.Tensor:
    """k rounds of block Gibbs started at y = f; returns the last visible sample."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ctx = ctx.detach()
    y = ctx.f.clone()
    for _ in range(k):
        h = sample_h_given_y(ctx, y, rng)
        y = sample_y_given_h(ctx, h, rng)
    return y


def mixture_density(ctx: EnergyContext, y: np.ndarray) -> np.ndarray:
    """Exact marginal density of y for a single context by enumerating the hidden states.

    Only practical for small M; used as a test oracle.
    """
    import itertools

    f = ctx.f[0].numpy()
    P = ctx.P[0].numpy()
    W = ctx.W[0].numpy()
    M = W.shape[1]
    states = np.array(list(itertools.product([-1.0, 1.0], repeat=M)))
    means = f + (states @ W.T) / P  # (2^M, N)
    # component weight ∝ exp(0.5 * (Wh)^T P^{-1} (Wh)) after integrating y out
    wh = states @ W.T
    logw = 0.5 * (wh * wh / P).sum(-1)
    weights = np.exp(logw - logw.max())
    weights /= weights.sum()
    y = np.atleast_2d(y)
    d = y[:, None, :] - means[None, :, :]
    comp = np.exp(-0.5 * (d * d * P).sum(-1)) * np.sqrt(np.prod(P) / (2 * np.pi) ** len(P))
    return comp @ weights


# --------------------------------------------------------------------------- generation


class PatientStreams:
    """Row-blocked random streams: each patient owns an independent generator keyed by (seed, patient id).

    Draws for a batch laid out patient-major with ``per_patient`` rows each are
    assembled block by block, so results do not depend on which other patients
    share the batch.
    """

    def __init__(self, ids: Sequence[str], seed: int, per_patient: int):
        self.per_patient = per_patient
        self.generators = [
            np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(pid.encode("utf-8"))])) for pid in ids
        ]

    def _blocks(self, method: str, shape):
        tail = tuple(shape[1:])
        return np.concatenate([getattr(g, method)((self.per_patient, *tail)) for g in self.generators], axis=0)

    def random(self, shape):
        return self._blocks("random", shape)

    def standard_normal(self, shape):
        return self._blocks("standard_normal", shape)


@dataclass
class TwinModel:
    """A trained generator together with the schema and normalization it was fit with."""

    schema: Schema
    normalizer: Normalizer
    net: NBMModel
    meta: dict = field(default_factory=dict)


@dataclass
class SampleSet:
    """Twin draws in original units: samples[p, s, t, n] for patient p, draw s, time t, variable n.

    ``baseline`` holds the (imputed) baseline each patient's twins were conditioned on.
    """

    patient_ids: list[str]
    times: np.ndarray
    samples: np.ndarray
    baseline: np.ndarray
    variables: list[str]
    provenance: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def index(self, patient_id: str) -> int:
        return self.patient_ids.index(patient_id)


def _stack_inputs(records: Sequence[PatientRecord], schema: Schema):
    y0 = np.array([r.baseline.values for r in records], dtype=np.float64).reshape(-1, schema.N)
    y0m = np.array([r.baseline.mask for r in records], dtype=bool).reshape(-1, schema.N)
    c = np.array([r.context for r in records], dtype=np.float64).reshape(-1, schema.C)
    cm = np.array([r.context_mask for r in records], dtype=bool).reshape(-1, schema.C)
    return (torch.as_tensor(np.nan_to_num(y0)), torch.as_tensor(y0m),
            torch.as_tensor(np.nan_to_num(c)), torch.as_tensor(cm))


@torch.no_grad()
def generate_trajectory(
    model: TwinModel,
    records: Sequence[PatientRecord],
    times: Sequence[float],
    n_samples: int,
    seed: int,
    k: int = DEFAULT_GIBBS_STEPS,
    mode: str = ROLLOUT,
    chunk_patients: int = 256,
) -> SampleSet:
    """Sample digital twins for ``records`` (original units) at the requested times.

    In rollout mode each time step is conditioned on the previous sampled visit
    (the baseline for the first step); in direct mode every time is conditioned
    on the baseline with t_cur = 0.
    """
    times = np.asarray(list(times), dtype=np.float64)
    if times.size == 0:
        raise ValueError("at least one generation time is required")
    if np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be positive and strictly increasing")
    if mode not in (ROLLOUT, DIRECT):
        raise ValueError(f"unknown generation mode {mode!r}")
    schema, norm_, net = model.schema, model.normalizer, model.net
    records = list(records)
    ids = [r.id for r in records]
    n_pat, n_t = len(records), times.size
    samples = np.zeros((n_pat, n_samples, n_t, schema.N))
    baseline = np.zeros((n_pat, schema.N))
    provenance = {"seed": seed, "mode": mode, "k": k, "model_id": model.meta.get("model_id", "")}
    if n_samples == 0 or n_pat == 0:
        return SampleSet(ids, times, samples, baseline, schema.longitudinal_names, provenance)

    normed = norm_.apply(records)
    net.eval()
    for lo in range(0, n_pat, chunk_patients):
        chunk = normed[lo : lo + chunk_patients]
        y0, y0m, c, cm = _stack_inputs(chunk, schema)
        y0, c = net.impute(y0, y0m, c, cm)
        baseline[lo : lo + len(chunk)] = norm_.invert_longitudinal(y0.numpy())
        rows = len(chunk) * n_samples
        y0r = y0.repeat_interleave(n_samples, dim=0)
        cr = c.repeat_interleave(n_samples, dim=0)
        rng = PatientStreams([r.id for r in chunk], seed, n_samples)
        y_cur = y0r
        t_prev = 0.0
        for j, t in enumerate(times):
            t_cur = torch.full((rows,), t_prev if mode == ROLLOUT else 0.0, dtype=DEFAULT_DTYPE)
            t_fut = torch.full((rows,), float(t), dtype=DEFAULT_DTYPE)
            ctx = energy_context(net, y0r, cr, y_cur if mode == ROLLOUT else y0r, t_cur, t_fut)
            y = gibbs_sample(ctx, k, rng)
            samples[lo : lo + len(chunk), :, j, :] = norm_.invert_longitudinal(
                y.numpy().reshape(len(chunk), n_samples, schema.N)
            )
            y_cur = y
            t_prev = float(t)
    return SampleSet(ids, times, samples, baseline, schema.longitudinal_names, provenance)
