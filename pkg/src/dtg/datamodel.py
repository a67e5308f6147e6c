"""Dataset schema, CSV ingestion, normalization, fold splitting and triplet construction."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"
_KINDS = (CONTINUOUS, BINARY)


class DataError(ValueError):
    """Input data violates the schema or the record invariants."""


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = CONTINUOUS

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DataError(f"variable {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Schema:
    longitudinal: tuple[Variable, ...]
    context: tuple[Variable, ...] = ()
    tte_outcomes: tuple[str, ...] = ()
    time_unit: str = "months"

    def __post_init__(self):
        if len(self.longitudinal) < 1:
            raise DataError("schema needs at least one longitudinal variable")
        names = [v.name for v in self.longitudinal] + [v.name for v in self.context]
        if len(set(names)) != len(names):
            raise DataError("variable names must be unique across longitudinal and context variables")
        if len(set(self.tte_outcomes)) != len(self.tte_outcomes):
            raise DataError("duplicate time-to-event outcome names")

    @property
    def N(self) -> int:
        return len(self.longitudinal)

    @property
    def C(self) -> int:
        return len(self.context)

    @property
    def longitudinal_names(self) -> list[str]:
        return [v.name for v in self.longitudinal]

    @property
    def context_names(self) -> list[str]:
        return [v.name for v in self.context]

    @classmethod
    def simple(cls, longitudinal: Sequence[str], context: Sequence[str] = (), tte_outcomes: Sequence[str] = ()):
        return cls(
            tuple(Variable(n) for n in longitudinal),
            tuple(Variable(n) for n in context),
            tuple(tte_outcomes),
        )

    def to_dict(self) -> dict:
        return {
            "longitudinal": [{"name": v.name, "kind": v.kind} for v in self.longitudinal],
            "context": [{"name": v.name, "kind": v.kind} for v in self.context],
            "tte_outcomes": list(self.tte_outcomes),
            "time_unit": self.time_unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        def _vars(items):
            return tuple(Variable(i["name"], i.get("kind", CONTINUOUS)) if isinstance(i, dict) else Variable(i) for i in items)

        return cls(
            _vars(d["longitudinal"]),
            _vars(d.get("context", [])),
            tuple(d.get("tte_outcomes", [])),
            d.get("time_unit", "months"),
        )

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass
class Visit:
    t: float
    values: np.ndarray  # (N,), NaN at unobserved slots
    mask: np.ndarray  # (N,) bool, True = observed

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not math.isfinite(self.t) or self.t < 0:
            raise DataError(f"visit time must be finite and non-negative, got {self.t}")
        if self.values.shape != self.mask.shape:
            raise DataError("visit values and mask differ in shape")
        self.values = np.where(self.mask, self.values, np.nan)


@dataclass(frozen=True)
class TTE:
    time: float
    event: bool


@dataclass
class PatientRecord:
    id: str
    context: np.ndarray
    context_mask: np.ndarray
    visits: list[Visit]
    tte: dict[str, TTE] = field(default_factory=dict)

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        self.context_mask = np.asarray(self.context_mask, dtype=bool)
        self.context = np.where(self.context_mask, self.context, np.nan)
        if not self.visits:
            raise DataError(f"patient {self.id}: no visits")
        if self.visits[0].t != 0:
            raise DataError(f"patient {self.id}: first visit must be the baseline at t=0")
        times = [v.t for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"patient {self.id}: visit times must be strictly increasing")

    @property
    def baseline(self) -> Visit:
        return self.visits[0]

    @property
    def times(self) -> np.ndarray:
        return np.array([v.t for v in self.visits])


@dataclass(frozen=True)
class Triplet:
    patient_id: str
    y0: np.ndarray
    y0_mask: np.ndarray
    c: np.ndarray
    c_mask: np.ndarray
    y_cur: np.ndarray
    y_cur_mask: np.ndarray
    t_cur: float
    y_fut: np.ndarray
    y_fut_mask: np.ndarray
    t_fut: float


def build_triplets(record: PatientRecord) -> list[Triplet]:
    """One triplet per ordered visit pair i < j, baseline included as a current visit."""
    base = record.baseline
    out = []
    for i, cur in enumerate(record.visits):
        for fut in record.visits[i + 1 :]:
            out.append(
                Triplet(
                    record.id,
                    base.values, base.mask,
                    record.context, record.context_mask,
                    cur.values, cur.mask, cur.t,
                    fut.values, fut.mask, fut.t,
                )
            )
    return out


# --------------------------------------------------------------------------- CSV ingestion


def _parse_float(cell: str, what: str) -> float | None:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"cannot parse {what}: {cell!r}") from None


def _check_header(header: list[str], leading: list[str], allowed: Sequence[str], path) -> list[str]:
    if header[: len(leading)] != leading:
        raise DataError(f"{path}: header must start with {','.join(leading)}")
    cols = header[len(leading) :]
    unknown = [c for c in cols if c not in allowed]
    if unknown:
        raise DataError(f"{path}: unknown column(s) {unknown}")
    if len(set(cols)) != len(cols):
        raise DataError(f"{path}: duplicate columns")
    return cols


def load_dataset(
    visits_path,
    schema: Schema,
    context_path=None,
    tte_path=None,
) -> list[PatientRecord]:
    """Read long-format visit CSV (plus optional context and TTE CSVs) into validated records.

    Blank cells become unobserved slots. Patients are returned in order of
    first appearance in the visit file.
    """
    names = schema.longitudinal_names
    rows: dict[str, dict[float, tuple[np.ndarray, np.ndarray]]] = {}
    with open(visits_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{visits_path}: empty file")
        cols = _check_header(header, ["patient_id", "time"], names, visits_path)
        col_idx = [names.index(c) for c in cols]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            pid = row[0].strip()
            t = _parse_float(row[1], f"time on line {lineno}")
            if t is None or not math.isfinite(t) or t < 0:
                raise DataError(f"{visits_path}:{lineno}: invalid time {row[1]!r}")
            values = np.full(schema.N, np.nan)
            mask = np.zeros(schema.N, dtype=bool)
            for j, cell in zip(col_idx, row[2:]):
                v = _parse_float(cell, f"{names[j]} on line {lineno}")
                if v is not None:
                    values[j] = v
                    mask[j] = True
            per = rows.setdefault(pid, {})
            if t in per:
                raise DataError(f"{visits_path}:{lineno}: duplicate visit for patient {pid} at t={t}")
            if per and t < max(per):
                raise DataError(f"{visits_path}:{lineno}: visit times for patient {pid} are not increasing")
            per[t] = (values, mask)

    contexts: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if context_path is not None:
        cnames = schema.context_names
        with open(context_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None) or []
            cols = _check_header(header, ["patient_id"], cnames, context_path)
            col_idx = [cnames.index(c) for c in cols]
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                pid = row[0].strip()
                if pid in contexts:
                    raise DataError(f"{context_path}:{lineno}: duplicate context row for {pid}")
                values = np.full(schema.C, np.nan)
                mask = np.zeros(schema.C, dtype=bool)
                for j, cell in zip(col_idx, row[1:]):
                    v = _parse_float(cell, f"{cnames[j]} on line {lineno}")
                    if v is not None:
                        values[j] = v
                        mask[j] = True
                contexts[pid] = (values, mask)

    ttes: dict[str, dict[str, TTE]] = {}
    if tte_path is not None:
        with open(tte_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None) or []
            if [h.strip() for h in header] != ["patient_id", "outcome", "time", "event"]:
                raise DataError(f"{tte_path}: header must be patient_id,outcome,time,event")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                pid, outcome = row[0].strip(), row[1].strip()
                if outcome not in schema.tte_outcomes:
                    raise DataError(f"{tte_path}:{lineno}: unknown outcome {outcome!r}")
                t = _parse_float(row[2], "tte time")
                if t is None or t < 0:
                    raise DataError(f"{tte_path}:{lineno}: invalid event time")
                ev = row[3].strip()
                if ev not in ("0", "1"):
                    raise DataError(f"{tte_path}:{lineno}: event must be 0 or 1")
                ttes.setdefault(pid, {})[outcome] = TTE(t, ev == "1")

    records = []
    for pid, per in rows.items():
        visits = [Visit(t, v, m) for t, (v, m) in sorted(per.items())]
        cv, cm = contexts.get(pid, (np.full(schema.C, np.nan), np.zeros(schema.C, dtype=bool)))
        records.append(PatientRecord(pid, cv, cm, visits, ttes.get(pid, {})))
    return records


def _fmt(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def write_dataset(records: Iterable[PatientRecord], schema: Schema, visits_path, context_path=None, tte_path=None) -> None:
    records = list(records)
    with open(visits_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time"] + schema.longitudinal_names)
        for r in records:
            for v in r.visits:
                w.writerow([r.id, _fmt(v.t)] + [_fmt(x) if m else "" for x, m in zip(v.values, v.mask)])
    if context_path is not None:
        with open(context_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id"] + schema.context_names)
            for r in records:
                w.writerow([r.id] + [_fmt(x) if m else "" for x, m in zip(r.context, r.context_mask)])
    if tte_path is not None:
        with open(tte_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "outcome", "time", "event"])
            for r in records:
                for name, ev in r.tte.items():
                    w.writerow([r.id, name, _fmt(ev.time), int(ev.event)])


# --------------------------------------------------------------------------- normalization


@dataclass
class Normalizer:
    """Per-variable z-scoring; binary variables map {0, 1} to {-1, +1}.

    Standard deviations use the population convention (ddof=0).
    """

    long_mean: np.ndarray
    long_std: np.ndarray
    ctx_mean: np.ndarray
    ctx_std: np.ndarray
    long_binary: np.ndarray
    ctx_binary: np.ndarray

    def _apply(self, x, mean, std, binary):
        return np.where(binary, 2.0 * x - 1.0, (x - mean) / std)

    def _invert(self, z, mean, std, binary):
        return np.where(binary, (z + 1.0) / 2.0, z * std + mean)

    def apply_longitudinal(self, x):
        return self._apply(np.asarray(x, dtype=np.float64), self.long_mean, self.long_std, self.long_binary)

    def invert_longitudinal(self, z):
        return self._invert(np.asarray(z, dtype=np.float64), self.long_mean, self.long_std, self.long_binary)

    def apply_context(self, x):
        return self._apply(np.asarray(x, dtype=np.float64), self.ctx_mean, self.ctx_std, self.ctx_binary)

    def invert_context(self, z):
        return self._invert(np.asarray(z, dtype=np.float64), self.ctx_mean, self.ctx_std, self.ctx_binary)

    def apply(self, records: Iterable[PatientRecord]) -> list[PatientRecord]:
        out = []
        for r in records:
            visits = [Visit(v.t, self.apply_longitudinal(v.values), v.mask.copy()) for v in r.visits]
            out.append(PatientRecord(r.id, self.apply_context(r.context), r.context_mask.copy(), visits, dict(r.tte)))
        return out

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in
                ("long_mean", "long_std", "ctx_mean", "ctx_std", "long_binary", "ctx_binary")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            np.asarray(d["long_mean"], dtype=np.float64),
            np.asarray(d["long_std"], dtype=np.float64),
            np.asarray(d["ctx_mean"], dtype=np.float64),
            np.asarray(d["ctx_std"], dtype=np.float64),
            np.asarray(d["long_binary"], dtype=bool),
            np.asarray(d["ctx_binary"], dtype=bool),
        )

    @classmethod
    def identity(cls, schema: Schema) -> "Normalizer":
        return cls(np.zeros(schema.N), np.ones(schema.N), np.zeros(schema.C), np.ones(schema.C),
                   np.zeros(schema.N, dtype=bool), np.zeros(schema.C, dtype=bool))


def _moments(columns: list[np.ndarray], names: list[str]):
    mean = np.zeros(len(columns))
    std = np.ones(len(columns))
    for j, col in enumerate(columns):
        col = col[np.isfinite(col)]
        if col.size < 2:
            raise DataError(f"variable {names[j]!r} is observed fewer than 2 times in the training set")
        mean[j] = col.mean()
        s = col.std()
        if s <= 0:
            logger.warning("variable %r has zero standard deviation; clamping to 1", names[j])
            s = 1.0
        std[j] = s
    return mean, std


def fit_normalizer(train: Sequence[PatientRecord], schema: Schema) -> Normalizer:
    """Fit z-scoring on observed entries of the training records only."""
    long_vals = np.array([v.values for r in train for v in r.visits]).reshape(-1, schema.N)
    long_bin = np.array([v.kind == BINARY for v in schema.longitudinal], dtype=bool)
    ctx_bin = np.array([v.kind == BINARY for v in schema.context], dtype=bool)
    lcols = [long_vals[:, j] for j in range(schema.N)]
    lm, ls = _moments([c if not b else np.array([0.0, 1.0]) for c, b in zip(lcols, long_bin)], schema.longitudinal_names)
    if schema.C:
        ctx_vals = np.array([r.context for r in train]).reshape(-1, schema.C)
        ccols = [ctx_vals[:, j] for j in range(schema.C)]
        cm, cs = _moments([c if not b else np.array([0.0, 1.0]) for c, b in zip(ccols, ctx_bin)], schema.context_names)
    else:
        cm, cs = np.zeros(0), np.ones(0)
    return Normalizer(lm, ls, cm, cs, long_bin, ctx_bin)


# --------------------------------------------------------------------------- folds


def split_folds(records: Sequence[PatientRecord], k: int = 5, seed: int = 0) -> dict[str, int]:
    """Assign each patient to one of ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("need at least two folds")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids")
    if len(ids) < k:
        raise DataError(f"{len(ids)} patients cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[i]: pos % k for pos, i in enumerate(order)}


def fold_split(records: Sequence[PatientRecord], assignment: dict[str, int], fold: int):
    train = [r for r in records if assignment[r.id] != fold]
    held = [r for r in records if assignment[r.id] == fold]
    return train, held
