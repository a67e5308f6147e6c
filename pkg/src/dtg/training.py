"""Losses, contrastive-divergence training and the minibatch loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .datamodel import PatientRecord, Schema, fit_normalizer
from .diffcore import DEFAULT_DTYPE
from .nbm import DEFAULT_GIBBS_STEPS, EnergyContext, TwinModel, energy_context, gibbs_sample, marginal_energy
from .networks import NBMModel, NetConfig

logger = logging.getLogger(__name__)

LOSS_TERMS = ("imputer", "rbm", "mse", "consistency", "event")


class NumericError(RuntimeError):
    """Training produced a non-finite loss; ``dump`` describes the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class LossWeights:
    imputer: float = 1.0
    rbm: float = 1.0
    mse: float = 1.0
    consistency: float = 1.0
    event: float = 1.0
    weight_decay: dict = field(default_factory=lambda: {
        "imputer": 0.1, "flow": 0.1, "corrector": 0.1, "wnet": 0.1, "pnet": 0.1, "tte": 0.1,
    })

    def __post_init__(self):
        if min(self.as_dict().values()) < 0 or max(self.as_dict().values()) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in LOSS_TERMS}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 3e-3
    k: int = DEFAULT_GIBBS_STEPS
    seed: int = 0
    fold: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_schedule: str = "constant"  # or "cosine": anneal to lr_min over all steps
    lr_min: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# --------------------------------------------------------------------------- batch tensors


class CohortTensors:
    """Flat visit and triplet index arrays for a list of normalized records."""

    def __init__(self, records: Sequence[PatientRecord], schema: Schema):
        self.records = list(records)
        self.schema = schema
        y, ym, c, cm, owner, t = [], [], [], [], [], []
        self.visit_slices = []
        base, cur, fut, trip_owner = [], [], [], []
        for p, r in enumerate(self.records):
            start = len(y)
            for v in r.visits:
                y.append(v.values)
                ym.append(v.mask)
                c.append(r.context)
                cm.append(r.context_mask)
                owner.append(p)
                t.append(v.t)
            n = len(r.visits)
            self.visit_slices.append((start, start + n))
            for i in range(n):
                for j in range(i + 1, n):
                    base.append(start)
                    cur.append(start + i)
                    fut.append(start + j)
                    trip_owner.append(p)
        N, C = schema.N, schema.C
        self.y = torch.as_tensor(np.nan_to_num(np.array(y, dtype=np.float64).reshape(-1, N)))
        self.y_mask = torch.as_tensor(np.array(ym, dtype=bool).reshape(-1, N))
        self.c = torch.as_tensor(np.nan_to_num(np.array(c, dtype=np.float64).reshape(-1, C)))
        self.c_mask = torch.as_tensor(np.array(cm, dtype=bool).reshape(-1, C))
        self.t = torch.as_tensor(np.array(t, dtype=np.float64))
        self.owner = np.array(owner, dtype=np.int64)
        self.base = np.array(base, dtype=np.int64)
        self.cur = np.array(cur, dtype=np.int64)
        self.fut = np.array(fut, dtype=np.int64)
        self.trip_owner = np.array(trip_owner, dtype=np.int64)
        self.tte = {}
        for name in schema.tte_outcomes:
            have = np.array([name in r.tte for r in self.records])
            time = np.array([r.tte[name].time if name in r.tte else 1.0 for r in self.records], dtype=np.float64)
            event = np.array([r.tte[name].event if name in r.tte else False for r in self.records])
            self.tte[name] = (torch.as_tensor(have), torch.as_tensor(time), torch.as_tensor(event))

    def batch(self, patients: np.ndarray) -> "Batch":
        patients = np.sort(np.asarray(patients, dtype=np.int64))
        vis = np.concatenate([np.arange(*self.visit_slices[p]) for p in patients]) if len(patients) else np.zeros(0, np.int64)
        remap = -np.ones(len(self.owner), dtype=np.int64)
        remap[vis] = np.arange(len(vis))
        trip = np.isin(self.trip_owner, patients)
        counts = np.array([self.visit_slices[p][1] - self.visit_slices[p][0] for p in patients])
        w = np.repeat(1.0 / counts, counts) if len(patients) else np.zeros(0)
        w = w * (len(w) / w.sum()) if len(w) else w
        base_vis = np.array([self.visit_slices[p][0] for p in patients], dtype=np.int64)
        return Batch(
            y=self.y[vis], y_mask=self.y_mask[vis], c=self.c[vis], c_mask=self.c_mask[vis], t=self.t[vis],
            visit_weight=torch.as_tensor(w, dtype=DEFAULT_DTYPE),
            base=torch.as_tensor(remap[self.base[trip]]), cur=torch.as_tensor(remap[self.cur[trip]]),
            fut=torch.as_tensor(remap[self.fut[trip]]),
            patient_base=torch.as_tensor(remap[base_vis]),
            tte={k: (h[patients], tm[patients], ev[patients]) for k, (h, tm, ev) in self.tte.items()},
            patient_ids=[self.records[p].id for p in patients],
        )


@dataclass
class Batch:
    y: torch.Tensor
    y_mask: torch.Tensor
    c: torch.Tensor
    c_mask: torch.Tensor
    t: torch.Tensor
    visit_weight: torch.Tensor
    base: torch.Tensor
    cur: torch.Tensor
    fut: torch.Tensor
    patient_base: torch.Tensor
    tte: dict
    patient_ids: list


@dataclass
class TripletInputs:
    """Imputed, detached triplet tensors shared by the longitudinal losses."""

    y0: torch.Tensor
    c: torch.Tensor
    y_cur: torch.Tensor
    t_cur: torch.Tensor
    y_fut: torch.Tensor
    y_fut_mask: torch.Tensor
    t_fut: torch.Tensor


def triplet_inputs(model: NBMModel, batch: Batch) -> TripletInputs:
    yi, ci = model.impute(batch.y, batch.y_mask, batch.c, batch.c_mask)
    return TripletInputs(
        y0=yi[batch.base], c=ci[batch.base], y_cur=yi[batch.cur], t_cur=batch.t[batch.cur],
        y_fut=yi[batch.fut], y_fut_mask=batch.y_mask[batch.fut], t_fut=batch.t[batch.fut],
    )


# --------------------------------------------------------------------------- losses


def loss_imputer(model: NBMModel, y, y_mask, c, c_mask, visit_weight) -> torch.Tensor:
    """Weighted masked reconstruction error of the raw autoencoder output.

    The conditional replacement in the imputer would make this identically
    zero on observed slots, so the decoder output itself is scored.
    """
    x = torch.cat([y, c], dim=-1)
    m = torch.cat([y_mask, c_mask], dim=-1)
    x = torch.where(m, x, torch.zeros_like(x))
    recon = model.imputer.reconstruct(x, m)
    V, D = x.shape
    if V == 0:
        return x.sum()
    sq = m.to(x.dtype) * (recon - x) ** 2
    return (visit_weight[:, None] * sq).sum() / (V * D)


def loss_rbm(model: NBMModel, trip: TripletInputs, k: int, rng, y_samp=None, ctx: EnergyContext | None = None):
    """Contrastive divergence: mean data energy minus mean energy of k-step Gibbs samples.

    Samples are drawn without gradient tracking and re-enter the marginal
    energy as constants. Pass ``y_samp`` to reuse fixed negative samples.
    """
    if ctx is None:
        ctx = energy_context(model, trip.y0, trip.c, trip.y_cur, trip.t_cur, trip.t_fut)
    if y_samp is None:
        y_samp = gibbs_sample(ctx, k, rng)
    return marginal_energy(ctx, trip.y_fut).mean() - marginal_energy(ctx, y_samp.detach()).mean()


def loss_featurewise_mse(model: NBMModel, trip: TripletInputs, P=None) -> torch.Tensor:
    """Precision-weighted squared error of the flow prediction at observed future entries; P carries no gradient."""
    if P is None:
        P = model.precision_P(torch.cat([trip.y_cur, trip.c], dim=-1), trip.t_cur, trip.t_fut)
    m = trip.y_fut_mask.to(trip.y_fut.dtype)
    resid = model.g(trip.y0, trip.c, trip.t_fut) - torch.where(trip.y_fut_mask, trip.y_fut, torch.zeros_like(trip.y_fut))
    return (m * P.detach() * resid**2).sum(-1).mean()


def loss_consistency(model: NBMModel, trip: TripletInputs) -> torch.Tensor:
    direct = model.g(trip.y0, trip.c, trip.t_fut)
    composed = model.mean_f_star(trip.y0, trip.c, trip.t_cur, trip.t_fut)
    return ((direct - composed) ** 2).sum(-1).mean()


def gumbel_nll(a, sigma, time, event) -> torch.Tensor:
    """Per-record negative log-likelihood of log T under a minimum-Gumbel(a, sigma) law.

    Events contribute -log density, right-censored records -log survival.
    A censoring time of zero contributes exactly zero.
    """
    positive = time > 0
    log_t = torch.log(torch.where(positive, time, torch.ones_like(time)))
    z = (log_t - a) / sigma
    ez = torch.exp(z)
    nll_event = -(z - ez) + torch.log(sigma)
    nll_cens = torch.where(positive, ez, torch.zeros_like(ez))
    return torch.where(event, nll_event, nll_cens)


def loss_event(model: NBMModel, batch: Batch) -> torch.Tensor:
    total = torch.zeros((), dtype=DEFAULT_DTYPE)
    if not model.config.tte_outcomes or len(batch.patient_ids) == 0:
        return total
    y0, c = model.impute(batch.y[batch.patient_base], batch.y_mask[batch.patient_base],
                         batch.c[batch.patient_base], batch.c_mask[batch.patient_base])
    for name in model.config.tte_outcomes:
        have, time, event = batch.tte[name]
        if not bool(have.any()):
            continue
        a = model.tte_location(name, y0[have], c[have])
        total = total + gumbel_nll(a, model.tte_sigma(name), time[have], event[have]).mean()
    return total


def compute_losses(model: NBMModel, batch: Batch, k: int, rng) -> dict[str, torch.Tensor]:
    trip = triplet_inputs(model, batch)
    losses = {"imputer": loss_imputer(model, batch.y, batch.y_mask, batch.c, batch.c_mask, batch.visit_weight)}
    if len(trip.t_fut):
        ctx = energy_context(model, trip.y0, trip.c, trip.y_cur, trip.t_cur, trip.t_fut)
        losses["rbm"] = loss_rbm(model, trip, k, rng, ctx=ctx)
        losses["mse"] = loss_featurewise_mse(model, trip, P=ctx.P)
        losses["consistency"] = loss_consistency(model, trip)
    else:
        zero = torch.zeros((), dtype=DEFAULT_DTYPE)
        losses.update(rbm=zero, mse=zero, consistency=zero)
    losses["event"] = loss_event(model, batch)
    return losses


def total_loss(losses: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    w = weights.as_dict()
    return sum(w[name] * losses[name] for name in LOSS_TERMS if name in losses)


def l2_penalty(model: NBMModel, weights: LossWeights) -> torch.Tensor:
    """0.5 * sum decay * ||theta||^2 over decayed groups (reported only; decay is applied by the optimizer)."""
    total = torch.zeros((), dtype=DEFAULT_DTYPE)
    for group, params in model.parameter_groups().items():
        d = weights.weight_decay.get(group, 0.0) if group != "gates" else 0.0
        for _, p in params:
            total = total + 0.5 * d * (p.detach() ** 2).sum()
    return total


# --------------------------------------------------------------------------- optimizer


def make_optimizer(model: NBMModel, lr: float, weights: LossWeights, betas=(0.9, 0.999), eps=1e-8):
    """AdamW with one parameter group per sub-network; gate and scale parameters are not decayed."""
    groups = []
    for group, params in model.parameter_groups().items():
        if not params:
            continue
        decay = 0.0 if group == "gates" else float(weights.weight_decay.get(group, 0.0))
        groups.append({"params": [p for _, p in params], "weight_decay": decay, "name": group})
    return torch.optim.AdamW(groups, lr=lr, betas=betas, eps=eps)


def adamw_step(params, lr: float, decay: float, betas=(0.9, 0.999), eps=1e-8, optimizer=None):
    """One decoupled-decay Adam update for parameters with populated gradients."""
    if optimizer is None:
        optimizer = torch.optim.AdamW(list(params), lr=lr, betas=betas, eps=eps, weight_decay=decay)
    optimizer.step()
    return optimizer


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: TwinModel
    history: list[dict]
    best_epoch: int


def _net_config_for(schema: Schema, net_config: NetConfig) -> NetConfig:
    cfg = copy.copy(net_config)
    if (cfg.N, cfg.C) != (schema.N, schema.C):
        raise ValueError(f"NetConfig dims (N={cfg.N}, C={cfg.C}) do not match schema (N={schema.N}, C={schema.C})")
    cfg.tte_outcomes = tuple(schema.tte_outcomes)
    return cfg


def _validation_score(net: NBMModel, data: CohortTensors, weights: LossWeights) -> float:
    # deterministic terms only: the CD estimate is sign-indefinite and sampling noise would drive selection
    with torch.no_grad():
        batch = data.batch(np.arange(len(data.records)))
        trip = triplet_inputs(net, batch)
        score = weights.imputer * loss_imputer(net, batch.y, batch.y_mask, batch.c, batch.c_mask, batch.visit_weight)
        if len(trip.t_fut):
            score = score + weights.mse * loss_featurewise_mse(net, trip) + weights.consistency * loss_consistency(net, trip)
        score = score + weights.event * loss_event(net, batch)
    return float(score)


def train(
    records: Sequence[PatientRecord],
    schema: Schema,
    net_config: NetConfig,
    train_config: TrainConfig,
    weights: LossWeights | None = None,
    validation: Sequence[PatientRecord] | None = None,
) -> TrainResult:
    """Fit a twin generator on ``records`` (original units)."""
    if not records:
        raise ValueError("no training records")
    weights = weights or LossWeights()
    torch.manual_seed(train_config.seed)
    normalizer = fit_normalizer(records, schema)
    net = NBMModel(_net_config_for(schema, net_config))
    data = CohortTensors(normalizer.apply(records), schema)
    val = CohortTensors(normalizer.apply(validation), schema) if validation else None
    optimizer = make_optimizer(net, train_config.lr, weights, train_config.betas, train_config.eps)
    rng = np.random.default_rng(train_config.seed)
    history: list[dict] = []
    best_score, best_state, best_epoch = math.inf, None, 0
    n = len(records)
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    scheduler = None
    if train_config.lr_schedule == "cosine" and train_config.epochs > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=steps_per_epoch * train_config.epochs, eta_min=train_config.lr_min
        )
    for epoch in range(1, train_config.epochs + 1):
        net.train()
        order = rng.permutation(n)
        sums = {name: 0.0 for name in LOSS_TERMS}
        sums["total"] = 0.0
        n_batches = 0
        for lo in range(0, n, train_config.batch_size):
            batch = data.batch(order[lo : lo + train_config.batch_size])
            losses = compute_losses(net, batch, train_config.k, rng)
            loss = total_loss(losses, weights)
            if not torch.isfinite(loss):
                dump = {
                    "epoch": epoch,
                    "patient_ids": batch.patient_ids,
                    "losses": {k: float(v.detach()) for k, v in losses.items()},
                }
                raise NumericError(f"non-finite loss at epoch {epoch}", dump)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            for name, v in losses.items():
                sums[name] += float(v.detach())
            sums["total"] += float(loss.detach())
            n_batches += 1
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        if val is not None:
            row["validation"] = _validation_score(net, val, weights)
            if row["validation"] < best_score:
                best_score, best_epoch = row["validation"], epoch
                best_state = copy.deepcopy(net.state_dict())
        history.append(row)
        logger.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
    if best_state is not None:
        net.load_state_dict(best_state)
    else:
        best_epoch = train_config.epochs
    net.eval()
    meta = {"train_config": train_config.to_dict(), "loss_weights": weights.to_dict()}
    return TrainResult(TwinModel(schema, normalizer, net, meta), history, best_epoch)
