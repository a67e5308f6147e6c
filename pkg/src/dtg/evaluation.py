"""Goodness-of-fit statistics for digital twins.

Population moments are assembled from per-patient twin moments with the laws
of total expectation, variance and covariance. Functions return ``None`` when
a statistic is undefined for the given data instead of raising.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datamodel import BINARY, PatientRecord, Schema, fold_split, split_folds
from .nbm import ROLLOUT, SampleSet, TwinModel, generate_trajectory

# --------------------------------------------------------------------------- population moments


def _select(draws, observed):
    draws = np.asarray(draws, dtype=np.float64)
    if observed is not None:
        draws = draws[np.asarray(observed, dtype=bool)]
    return draws


def mu_pred(draws, observed=None) -> float | None:
    """Population mean of per-patient twin means; ``draws`` has shape (patients, samples)."""
    d = _select(draws, observed)
    if d.shape[0] < 1:
        return None
    return float(d.mean(axis=1).mean())


def sigma_pred(draws, observed=None) -> float | None:
    """sqrt(Var_pop[twin means] + Mean_pop[twin variances]), population (ddof=0) conventions throughout."""
    d = _select(draws, observed)
    if d.shape[0] < 2:
        return None
    return float(math.sqrt(d.mean(axis=1).var() + d.var(axis=1).mean()))


def _total_cov(y, z) -> float:
    my, mz = y.mean(axis=1), z.mean(axis=1)
    between = np.mean((my - my.mean()) * (mz - mz.mean()))
    within = np.mean(((y - my[:, None]) * (z - mz[:, None])).mean(axis=1))
    return float(between + within)


def rho_pred(draws_y, draws_z, observed=None) -> float | None:
    """(Cov_pop[twin means] + Mean_pop[twin covariances]) / (sigma_pred[y] sigma_pred[z])."""
    y = _select(draws_y, observed)
    z = _select(draws_z, observed)
    if y.shape[0] < 2:
        return None
    # rho is scale-free; rescaling keeps the moments away from overflow and underflow
    sy, sz = np.abs(y).max(), np.abs(z).max()
    if not (0 < sy < np.inf and 0 < sz < np.inf):
        return None
    y, z = y / sy, z / sz
    # both variances through the same routine, so rho(y, y) is exactly 1
    vy, vz = _total_cov(y, y), _total_cov(z, z)
    if vy <= 0 or vz <= 0:
        return None
    denom = math.sqrt(vy * vz)
    if not 0 < denom < math.inf:  # product under- or overflowed
        denom = math.sqrt(vy) * math.sqrt(vz)
    return float(np.clip(_total_cov(y, z) / denom, -1.0, 1.0))

# --------------------------------------------------------------------------- discrimination


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 3:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float((dx * dx).sum() * (dy * dy).sum()))
    if den == 0:
        return None
    return float(np.clip((dx * dy).sum() / den, -1.0, 1.0))


def auc_binary(labels, scores) -> float | None:
    """Probability a random positive outranks a random negative; ties count one half."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        return None
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def concordance_index(predicted, times, events, horizon: float | None = None) -> float | None:
    """Harrell's C for predicted event-time scores (larger = later event).

    Events after ``horizon`` are treated as censored at the horizon.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if horizon is not None:
        e = e & (t <= horizon)
        t = np.minimum(t, horizon)
    # pair (i, j) is comparable when i has an event strictly before j's time,
    # or at the same time as a censored j
    earlier = (t[:, None] < t[None, :]) | ((t[:, None] == t[None, :]) & ~e[None, :])
    comparable = e[:, None] & earlier
    np.fill_diagonal(comparable, False)
    n = comparable.sum()
    if n == 0:
        return None
    conc = (pred[:, None] < pred[None, :]) & comparable
    tied = (pred[:, None] == pred[None, :]) & comparable
    return float((conc.sum() + 0.5 * tied.sum()) / n)


# --------------------------------------------------------------------------- pairing twins with observations


def observed_at(records: Sequence[PatientRecord], sampleset: SampleSet, variable: int, time_index: int,
                bin_width: float = 3.0):
    """Observed values paired with twin time ``time_index`` by nearest-bin assignment.

    Returns (values, baseline_values, present) aligned with ``sampleset.patient_ids``.
    """
    by_id = {r.id: r for r in records}
    t_gen = float(sampleset.times[time_index])
    n = len(sampleset.patient_ids)
    values = np.full(n, np.nan)
    base = np.full(n, np.nan)
    for p, pid in enumerate(sampleset.patient_ids):
        r = by_id.get(pid)
        if r is None:
            continue
        if r.baseline.mask[variable]:
            base[p] = r.baseline.values[variable]
        best = None
        for v in r.visits[1:]:
            if not v.mask[variable]:
                continue
            gap = abs(v.t - t_gen)
            if gap <= bin_width / 2 and (best is None or gap < best[0]):
                # only pair a visit with the generated time it is nearest to
                if int(np.argmin(np.abs(sampleset.times - v.t))) == time_index:
                    best = (gap, v.values[variable])
        if best is not None:
            values[p] = best[1]
    return values, base, np.isfinite(values)


def twin_draws(sampleset: SampleSet, variable: int, time_index: int, change_from_baseline: bool = False):
    d = sampleset.samples[:, :, time_index, variable]
    if change_from_baseline:
        d = d - sampleset.baseline[:, variable][:, None]
    return d


def pearson_obs_vs_meantwin(sampleset: SampleSet, records: Sequence[PatientRecord], variable: int, time_index: int,
                            change_from_baseline: bool = True, bin_width: float = 3.0) -> float | None:
    """Pearson r between observed values and per-patient mean twins.

    With ``change_from_baseline`` the observation is measured from the observed
    baseline and the twin from the baseline it was conditioned on.
    """
    obs, base, present = observed_at(records, sampleset, variable, time_index, bin_width)
    mean_twin = twin_draws(sampleset, variable, time_index, change_from_baseline).mean(axis=1)
    if change_from_baseline:
        obs = obs - base
        present = present & np.isfinite(base)
    return pearson(obs[present], mean_twin[present])


def auc_obs_vs_twin(sampleset: SampleSet, records: Sequence[PatientRecord], variable: int, time_index: int,
                    threshold: float = 0.5, bin_width: float = 3.0) -> float | None:
    """AUC of the twin response rate (fraction of draws above ``threshold``) against observed binary outcomes."""
    obs, _, present = observed_at(records, sampleset, variable, time_index, bin_width)
    score = (twin_draws(sampleset, variable, time_index) > threshold).mean(axis=1)
    return auc_binary(obs[present] > threshold, score[present])


# --------------------------------------------------------------------------- stratified densities


def _gauss(grid, mean, std):
    return np.exp(-0.5 * ((grid - mean) / std) ** 2) / (std * math.sqrt(2 * math.pi))


@dataclass
class DifferenceDensity:
    grid: np.ndarray
    data_bottom: tuple[float, float]
    data_top: tuple[float, float]
    twin_bottom: tuple[float, float]
    twin_top: tuple[float, float]
    data_difference: np.ndarray
    twin_difference: np.ndarray


def difference_density_from_moments(grid, bottom, top) -> np.ndarray:
    """Gaussian density of the top cohort minus that of the bottom cohort."""
    return _gauss(grid, *top) - _gauss(grid, *bottom)


def quartile_difference_density(observations, draws, stratify, grid=None) -> DifferenceDensity | None:
    """Compare top and bottom baseline quartiles of the data with the twins of the same patients.

    ``observations`` (P,) observed outcome, ``draws`` (P, S) twins,
    ``stratify`` (P,) baseline stratification values; NaN entries are dropped.
    """
    obs = np.asarray(observations, dtype=np.float64)
    strat = np.asarray(stratify, dtype=np.float64)
    draws = np.asarray(draws, dtype=np.float64)
    keep = np.isfinite(obs) & np.isfinite(strat)
    obs, strat, draws = obs[keep], strat[keep], draws[keep]
    if obs.size < 8:
        return None
    lo, hi = np.quantile(strat, [0.25, 0.75])
    bottom, top = strat <= lo, strat >= hi
    if bottom.sum() < 2 or top.sum() < 2:
        return None
    data_b = (float(obs[bottom].mean()), float(obs[bottom].std()))
    data_t = (float(obs[top].mean()), float(obs[top].std()))
    twin_b = (mu_pred(draws[bottom]), sigma_pred(draws[bottom]))
    twin_t = (mu_pred(draws[top]), sigma_pred(draws[top]))
    if min(data_b[1], data_t[1], twin_b[1], twin_t[1]) <= 0:
        return None
    if grid is None:
        span = max(data_b[1], data_t[1], twin_b[1], twin_t[1])
        centre = [data_b[0], data_t[0], twin_b[0], twin_t[0]]
        grid = np.linspace(min(centre) - 4 * span, max(centre) + 4 * span, 201)
    grid = np.asarray(grid, dtype=np.float64)
    return DifferenceDensity(
        grid, data_b, data_t, twin_b, twin_t,
        difference_density_from_moments(grid, data_b, data_t),
        difference_density_from_moments(grid, twin_b, twin_t),
    )


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    """Per variable x time x cohort moment comparison plus cross-correlations and survival metrics."""

    rows: list[dict] = field(default_factory=list)
    correlations: list[dict] = field(default_factory=list)
    survival: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"rows": self.rows, "correlations": self.correlations, "survival": self.survival,
                       "provenance": self.provenance}, fh, indent=2, default=_json_default)

    def to_csv(self, path) -> None:
        cols = ["cohort", "variable", "time", "n_obs", "obs_mean", "obs_std", "pred_mean", "pred_std", "pearson", "auc"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in cols})

    def lookup(self, variable: str, time: float, cohort: str = "all") -> dict | None:
        for row in self.rows:
            if row["variable"] == variable and row["time"] == time and row["cohort"] == cohort:
                return row
        return None


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def build_report(
    sampleset: SampleSet,
    records: Sequence[PatientRecord],
    schema: Schema,
    cohorts: Mapping[str, set] | None = None,
    bin_width: float = 3.0,
    change_from_baseline: bool = True,
    tte_predictions: Mapping[str, np.ndarray] | None = None,
    horizons: Sequence[float | None] = (None,),
) -> EvalReport:
    """Compute every report metric on a SampleSet; continuous variables use change from baseline."""
    cohorts = dict(cohorts or {"all": set(sampleset.patient_ids)})
    ids = np.array(sampleset.patient_ids)
    report = EvalReport(provenance=dict(sampleset.provenance, change_from_baseline=change_from_baseline,
                                        bin_width=bin_width))
    for cname, members in cohorts.items():
        in_cohort = np.isin(ids, list(members))
        for j, var in enumerate(schema.longitudinal):
            binary = var.kind == BINARY
            cfb = change_from_baseline and not binary
            for ti, t in enumerate(sampleset.times):
                obs, base, present = observed_at(records, sampleset, j, ti, bin_width)
                draws = twin_draws(sampleset, j, ti, cfb)
                if cfb:
                    obs = obs - base
                    present = present & np.isfinite(base)
                sel = present & in_cohort
                row = {
                    "cohort": cname, "variable": var.name, "time": float(t), "n_obs": int(sel.sum()),
                    "obs_mean": float(obs[sel].mean()) if sel.sum() >= 1 else None,
                    "obs_std": float(obs[sel].std()) if sel.sum() >= 2 else None,
                    "pred_mean": mu_pred(draws, sel) if sel.sum() >= 1 else None,
                    "pred_std": sigma_pred(draws, sel),
                    "pearson": None if binary else pearson(obs[sel], draws[sel].mean(axis=1)),
                    "auc": auc_binary(obs[sel] > 0.5, (draws[sel] > 0.5).mean(axis=1)) if binary else None,
                }
                report.rows.append(row)
            for k in range(j + 1, schema.N):
                for ti, t in enumerate(sampleset.times):
                    oj, bj, pj = observed_at(records, sampleset, j, ti, bin_width)
                    ok, bk, pk = observed_at(records, sampleset, k, ti, bin_width)
                    dj = twin_draws(sampleset, j, ti, change_from_baseline)
                    dk = twin_draws(sampleset, k, ti, change_from_baseline)
                    if change_from_baseline:
                        oj, ok = oj - bj, ok - bk
                    sel = np.isfinite(oj) & np.isfinite(ok) & in_cohort
                    report.correlations.append({
                        "cohort": cname, "pair": [var.name, schema.longitudinal[k].name], "time": float(t),
                        "n_obs": int(sel.sum()),
                        "obs_corr": pearson(oj[sel], ok[sel]) if sel.sum() >= 3 else None,
                        "pred_corr": rho_pred(dj, dk, sel),
                    })
        for outcome, pred in (tte_predictions or {}).items():
            by_id = {r.id: r for r in records}
            t = np.array([by_id[i].tte[outcome].time if outcome in by_id[i].tte else np.nan for i in ids])
            e = np.array([by_id[i].tte[outcome].event if outcome in by_id[i].tte else False for i in ids])
            sel = in_cohort & np.isfinite(t)
            for h in horizons:
                report.survival.append({
                    "cohort": cname, "outcome": outcome, "horizon": h, "n": int(sel.sum()),
                    "concordance": concordance_index(np.asarray(pred)[sel], t[sel], e[sel], h),
                })
    return report


def twin_record(sampleset: SampleSet, patient_id: str) -> list[dict]:
    """Per-patient table: one row per longitudinal variable, mean and std of the twins at each requested time."""
    p = sampleset.index(patient_id)
    table = []
    for j, name in enumerate(sampleset.variables):
        d = sampleset.samples[p, :, :, j]
        table.append({"variable": name, "mean": d.mean(axis=0).tolist(), "std": d.std(axis=0).tolist()})
    return table


# --------------------------------------------------------------------------- explainability and validation


def mask_feature(records: Sequence[PatientRecord], schema: Schema, feature: str) -> list[PatientRecord]:
    """Copies of ``records`` with ``feature`` removed from the baseline (longitudinal) or the context."""
    out = []
    if feature in schema.longitudinal_names:
        j = schema.longitudinal_names.index(feature)
        for r in records:
            base = r.baseline
            mask = base.mask.copy()
            mask[j] = False
            visits = [type(base)(base.t, base.values.copy(), mask)] + list(r.visits[1:])
            out.append(PatientRecord(r.id, r.context, r.context_mask, visits, r.tte))
    elif feature in schema.context_names:
        j = schema.context_names.index(feature)
        for r in records:
            cmask = r.context_mask.copy()
            cmask[j] = False
            out.append(PatientRecord(r.id, r.context, cmask, r.visits, r.tte))
    else:
        raise KeyError(f"unknown feature {feature!r}")
    return out


def input_sensitivity(
    model: TwinModel,
    records: Sequence[PatientRecord],
    feature: str,
    outcome: str,
    time: float,
    n_samples: int = 100,
    seed: int = 0,
    change_from_baseline: bool = False,
    bin_width: float = 3.0,
    k: int = 16,
) -> float | None:
    """Change in twin-vs-observation Pearson r when ``feature`` is masked at baseline (negative = worse)."""
    j = model.schema.longitudinal_names.index(outcome)
    full = generate_trajectory(model, records, [time], n_samples, seed, k=k)
    masked_records = mask_feature(records, model.schema, feature)
    masked = generate_trajectory(model, masked_records, [time], n_samples, seed, k=k)
    r_full = pearson_obs_vs_meantwin(full, records, j, 0, change_from_baseline, bin_width)
    r_masked = pearson_obs_vs_meantwin(masked, records, j, 0, change_from_baseline, bin_width)
    if r_full is None or r_masked is None:
        return None
    return r_masked - r_full


@dataclass
class CrossValidationResult:
    samples: SampleSet
    report: EvalReport
    fold_of: dict[str, int]
    models: list[TwinModel]
    training_ids: list[set]


def merge_samplesets(parts: Sequence[SampleSet]) -> SampleSet:
    if not parts:
        raise ValueError("nothing to merge")
    times = parts[0].times
    for p in parts:
        if not np.array_equal(p.times, times) or p.n_samples != parts[0].n_samples:
            raise ValueError("cannot merge SampleSets with different times or draw counts")
    prov = dict(parts[0].provenance)
    prov["merged_from"] = [p.provenance for p in parts]
    return SampleSet(
        [i for p in parts for i in p.patient_ids], times,
        np.concatenate([p.samples for p in parts]), np.concatenate([p.baseline for p in parts]),
        parts[0].variables, prov,
    )


def cross_validate(
    records: Sequence[PatientRecord],
    schema: Schema,
    net_config,
    train_config,
    weights=None,
    times: Sequence[float] = (3.0, 6.0, 12.0),
    n_samples: int = 100,
    k_folds: int = 5,
    seed: int = 0,
    mode: str = ROLLOUT,
    bin_width: float = 3.0,
) -> CrossValidationResult:
    """Train one model per fold, generate twins for its held-out patients, and evaluate the merged predictions."""
    from .training import train

    records = list(records)
    if len(records) < k_folds:
        raise ValueError(f"cross-validation needs at least {k_folds} patients")
    fold_of = split_folds(records, k_folds, seed)
    parts, models, seen, tte_pred = [], [], [], {name: {} for name in schema.tte_outcomes}
    for fold in range(k_folds):
        train_recs, held = fold_split(records, fold_of, fold)
        result = train(train_recs, schema, net_config, train_config, weights)
        result.model.meta["model_id"] = f"fold{fold}"
        models.append(result.model)
        seen.append({r.id for r in train_recs})
        parts.append(generate_trajectory(result.model, held, times, n_samples, seed, k=train_config.k, mode=mode))
        for name in schema.tte_outcomes:
            for pid, a in zip([r.id for r in held], tte_locations(result.model, held, name)):
                tte_pred[name][pid] = a
    merged = merge_samplesets(parts)
    preds = {name: np.array([tte_pred[name][i] for i in merged.patient_ids]) for name in schema.tte_outcomes}
    report = build_report(merged, records, schema, bin_width=bin_width, tte_predictions=preds)
    return CrossValidationResult(merged, report, fold_of, models, seen)


def tte_locations(model: TwinModel, records: Sequence[PatientRecord], outcome: str) -> np.ndarray:
    """Predicted location a(x) of log event time (original time units) for each record."""
    import torch

    from .nbm import _stack_inputs

    normed = model.normalizer.apply(records)
    with torch.no_grad():
        y0, y0m, c, cm = _stack_inputs(normed, model.schema)
        y0, c = model.net.impute(y0, y0m, c, cm)
        return model.net.tte_location(outcome, y0, c).numpy()
