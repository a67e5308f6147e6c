"""Command-line interface, run configuration and on-disk formats.

Commands: synth, train, generate, evaluate, gradcheck, twin-record.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric failure,
4 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import struct
import sys
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import evaluation, nbm, synth, training
from .datamodel import DataError, Normalizer, Schema, fold_split, load_dataset, split_folds, write_dataset
from .diffcore import grad_check, named_params
from .networks import NBMModel, NetConfig
from .nbm import SampleSet, TwinModel

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4

CHECKPOINT_MAGIC = b"DTGMODEL"
SAMPLESET_MAGIC = b"DTGSAMPL"
FORMAT_VERSION = 1
GRADCHECK_TOLERANCE = 1e-4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- run configuration

# key -> (type, default); None default means optional
CONFIG_KEYS: dict[str, tuple[type, Any]] = {
    "seed": (int, None),
    "out": (str, "."),
    # data
    "schema": (str, None),
    "visits": (str, None),
    "context": (str, None),
    "tte": (str, None),
    "k_folds": (int, 5),
    "fold": (int, None),
    # network
    "M": (int, 4),
    "imputer_embed_dim": (int, 8),
    "flow_depth": (int, 3),
    "corrector_layers": (int, 1),
    "wnet_layers": (int, 1),
    "pnet_layers": (int, 1),
    "tte_residual_layers": (int, 1),
    "w_scale": (str, "total"),
    # training
    "epochs": (int, 50),
    "batch_size": (int, 64),
    "lr": (float, 3e-3),
    "lr_schedule": (str, "constant"),
    "k": (int, 16),
    "w_imputer": (float, 1.0),
    "w_rbm": (float, 1.0),
    "w_mse": (float, 1.0),
    "w_consistency": (float, 1.0),
    "w_event": (float, 1.0),
    "weight_decay": (float, 0.1),
    # generation and evaluation
    "times": (list, [1.0, 2.0, 4.0, 8.0]),
    "samples": (int, 100),
    "mode": (str, nbm.ROLLOUT),
    "bin_width": (float, 3.0),
    "change_from_baseline": (bool, True),
    # synthetic cohorts
    "synth_preset": (str, "ou_1d"),
    "synth_patients": (int, 200),
    "synth_dims": (int, 3),
    "synth_rho": (float, 0.6),
    "synth_missing_rate": (float, 0.1),
    "synth_noise_context": (int, 0),
    "synth_schedule": (list, [0.0, 1.0, 2.0, 4.0, 8.0]),
    "tte_coef": (list, None),
    "tte_intercept": (float, 0.0),
    "tte_kappa": (float, 2.0),
    "tte_censor_mean": (float, None),
    "tte_admin_censor": (float, None),
}

PATH_KEYS = ("schema", "visits", "context", "tte")


def _coerce(key: str, value):
    typ, _ = CONFIG_KEYS[key]
    if value is None:
        return None
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean")
        return value
    if typ is list:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r} must be a list")
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r} must hold numbers") from exc
    if typ is int and (isinstance(value, bool) or (isinstance(value, float) and not value.is_integer())):
        raise ConfigError(f"config key {key!r} must be an integer")
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r} expects {typ.__name__}, got {value!r}") from exc


def resolve_config(path: str | None, overrides: dict) -> dict:
    """Defaults, then the JSON file, then command-line overrides; relative data paths resolve against the file."""
    raw: dict = {}
    base = Path(".")
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object of flat keys")
        base = Path(path).resolve().parent
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    for key, value in raw.items():
        cfg[key] = _coerce(key, value)
    for key in PATH_KEYS:
        if cfg[key] is not None and not Path(cfg[key]).is_absolute():
            cfg[key] = str(base / cfg[key])
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = _coerce(key, value)
    if cfg["seed"] is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    return cfg


def _require_files(cfg: dict, keys) -> None:
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"config key {key!r} is required for this command")
    for key in PATH_KEYS:
        if cfg[key] is not None and not Path(cfg[key]).is_file():
            raise ConfigError(f"{key} file {cfg[key]} does not exist")


def write_config_echo(cfg: dict, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{command}.config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def net_config_from(cfg: dict, schema: Schema) -> NetConfig:
    try:
        return NetConfig(
            N=schema.N, M=cfg["M"], C=schema.C, imputer_embed_dim=cfg["imputer_embed_dim"],
            flow_depth=cfg["flow_depth"], corrector_layers=cfg["corrector_layers"], wnet_layers=cfg["wnet_layers"],
            pnet_layers=cfg["pnet_layers"], tte_residual_layers=cfg["tte_residual_layers"],
            tte_outcomes=schema.tte_outcomes, w_scale=cfg["w_scale"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(cfg: dict) -> training.TrainConfig:
    try:
        return training.TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], k=cfg["k"], seed=cfg["seed"],
            fold=cfg["fold"], lr_schedule=cfg["lr_schedule"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def loss_weights_from(cfg: dict) -> training.LossWeights:
    try:
        return training.LossWeights(
            imputer=cfg["w_imputer"], rbm=cfg["w_rbm"], mse=cfg["w_mse"], consistency=cfg["w_consistency"],
            event=cfg["w_event"],
            weight_decay={k: cfg["weight_decay"] for k in ("imputer", "flow", "corrector", "wnet", "pnet", "tte")},
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_records(cfg: dict):
    _require_files(cfg, ("schema", "visits"))
    schema = Schema.load(cfg["schema"])
    return schema, load_dataset(cfg["visits"], schema, cfg["context"], cfg["tte"])


def select_fold(records, cfg: dict, held_out: bool):
    """With a fold id, return the training part (held_out=False) or that fold's patients."""
    if cfg["fold"] is None:
        return list(records), []
    if not 0 <= cfg["fold"] < cfg["k_folds"]:
        raise ConfigError(f"fold must lie in [0, {cfg['k_folds']})")
    train_recs, held = fold_split(records, split_folds(records, cfg["k_folds"], cfg["seed"]), cfg["fold"])
    return (held, train_recs) if held_out else (train_recs, held)


# --------------------------------------------------------------------------- binary formats


def _write_framed(path, magic: bytes, header: dict, blob: bytes) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)


def _read_framed(path, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(magic)] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    (n,) = struct.unpack("<Q", data[len(magic) : len(magic) + 8])
    start = len(magic) + 8
    header = json.loads(data[start : start + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, data[start + n :]


def save_model(model: TwinModel, path) -> None:
    """JSON header plus every parameter as float64 little-endian, in declaration order."""
    params = list(model.net.named_parameters())
    header = {
        "format_version": FORMAT_VERSION,
        "schema": model.schema.to_dict(),
        "net_config": model.net.config.to_dict(),
        "normalizer": model.normalizer.to_dict(),
        "meta": model.meta,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in params],
    }
    blob = b"".join(p.detach().to(torch.float64).numpy().astype("<f8").tobytes() for _, p in params)
    _write_framed(path, CHECKPOINT_MAGIC, header, blob)


def load_model(path) -> TwinModel:
    header, blob = _read_framed(path, CHECKPOINT_MAGIC)
    net = NBMModel(NetConfig(**header["net_config"]))
    flat = np.frombuffer(blob, dtype="<f8")
    params = dict(net.named_parameters())
    offset = 0
    with torch.no_grad():
        for entry in header["parameters"]:
            p = params[entry["name"]]
            n = int(np.prod(entry["shape"], dtype=np.int64))
            if list(p.shape) != entry["shape"] or offset + n > flat.size:
                raise DataError(f"{path}: parameter {entry['name']} does not match the declared network")
            p.copy_(torch.from_numpy(flat[offset : offset + n].reshape(entry["shape"]).copy()))
            offset += n
    if offset != flat.size:
        raise DataError(f"{path}: trailing bytes in parameter blob")
    net.eval()
    return TwinModel(Schema.from_dict(header["schema"]), Normalizer.from_dict(header["normalizer"]), net,
                     header.get("meta", {}))


def save_sampleset(ss: SampleSet, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "patient_ids": list(ss.patient_ids),
        "times": [float(t) for t in ss.times],
        "variables": list(ss.variables),
        "shape": list(ss.samples.shape),
        "provenance": ss.provenance,
    }
    blob = np.ascontiguousarray(ss.samples, dtype="<f8").tobytes() + np.ascontiguousarray(ss.baseline, dtype="<f8").tobytes()
    _write_framed(path, SAMPLESET_MAGIC, header, blob)


def load_sampleset(path) -> SampleSet:
    header, blob = _read_framed(path, SAMPLESET_MAGIC)
    shape = tuple(header["shape"])
    flat = np.frombuffer(blob, dtype="<f8")
    n = int(np.prod(shape, dtype=np.int64))
    if flat.size != n + shape[0] * shape[3]:
        raise DataError(f"{path}: blob size does not match header shape")
    return SampleSet(
        header["patient_ids"], np.asarray(header["times"], dtype=np.float64), flat[:n].reshape(shape).copy(),
        flat[n:].reshape(shape[0], shape[3]).copy(), header["variables"], header["provenance"],
    )


# --------------------------------------------------------------------------- commands


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg: dict) -> int:
    preset = cfg["synth_preset"]
    schedule = [cfg["synth_schedule"]]
    if preset == "ou_1d":
        spec = synth.ou_1d(cfg["synth_missing_rate"], schedule)
    elif preset == "ou_correlated":
        spec = synth.ou_correlated(cfg["synth_dims"], cfg["synth_rho"], cfg["synth_missing_rate"], schedule)
    else:
        raise ConfigError(f"unknown synth_preset {preset!r}")
    tte = None
    if cfg["tte_coef"] is not None:
        coef = cfg["tte_coef"]
        if len(coef) != spec.C:
            raise ConfigError(f"tte_coef needs {spec.C} entries")
        tte = {"event": synth.TTESpec(coef, cfg["tte_intercept"], cfg["tte_kappa"], cfg["tte_censor_mean"],
                                      cfg["tte_admin_censor"])}
    records = synth.gen_cohort(spec, cfg["synth_patients"], cfg["seed"], tte, cfg["synth_noise_context"])
    schema = synth.cohort_schema(spec, cfg["synth_noise_context"], list(tte or {}))
    out = _out_dir(cfg)
    schema.save(out / "schema.json")
    write_dataset(records, schema, out / "visits.csv", out / "context.csv", out / "tte.csv" if tte else None)
    with open(out / "ou_spec.json", "w", encoding="utf-8") as fh:
        json.dump({"ou": spec.to_dict(), "tte": {k: v.to_dict() for k, v in (tte or {}).items()}}, fh, indent=2)
    write_config_echo(cfg, out, "synth")
    print(f"wrote {len(records)} patients to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    schema, records = load_records(cfg)
    train_recs, validation = select_fold(records, cfg, held_out=False)
    result = training.train(train_recs, schema, net_config_from(cfg, schema), train_config_from(cfg),
                            loss_weights_from(cfg), validation or None)
    out = _out_dir(cfg)
    result.model.meta["model_id"] = f"seed{cfg['seed']}" + ("" if cfg["fold"] is None else f"-fold{cfg['fold']}")
    save_model(result.model, out / "model.dtg")
    cols = sorted({k for row in result.history for k in row}, key=lambda k: (k != "epoch", k))
    with open(out / "telemetry.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(result.history)
    write_config_echo(cfg, out, "train")
    print(f"trained {len(train_recs)} patients, best epoch {result.best_epoch}; model at {out / 'model.dtg'}")
    return EXIT_OK


def _load_model_arg(path: str | None) -> TwinModel:
    if path is None:
        raise ConfigError("--model is required")
    if not Path(path).is_file():
        raise ConfigError(f"model file {path} does not exist")
    return load_model(path)


def cmd_generate(cfg: dict, model_path: str | None) -> int:
    model = _load_model_arg(model_path)
    schema, records = load_records(cfg)
    if schema.to_dict() != model.schema.to_dict():
        raise DataError("data schema does not match the model's schema")
    if cfg["fold"] is not None:
        records, _ = select_fold(records, cfg, held_out=True)
    try:
        ss = nbm.generate_trajectory(model, records, cfg["times"], cfg["samples"], cfg["seed"], k=cfg["k"],
                                     mode=cfg["mode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(cfg)
    save_sampleset(ss, out / "samples.dtgs")
    write_config_echo(cfg, out, "generate")
    print(f"generated {ss.samples.shape[1]} twins for {len(records)} patients at {len(ss.times)} times")
    return EXIT_OK


def cmd_evaluate(cfg: dict, sampleset_path: str | None, model_path: str | None) -> int:
    if sampleset_path is None or not Path(sampleset_path).is_file():
        raise ConfigError("--sampleset must name an existing SampleSet file")
    ss = load_sampleset(sampleset_path)
    schema, records = load_records(cfg)
    by_id = {r.id: r for r in records}
    missing = [i for i in ss.patient_ids if i not in by_id]
    if missing:
        raise DataError(f"{len(missing)} SampleSet patients are absent from the data (first: {missing[0]})")
    records = [by_id[i] for i in ss.patient_ids]
    tte_pred = {}
    if model_path is not None and schema.tte_outcomes:
        model = _load_model_arg(model_path)
        tte_pred = {name: evaluation.tte_locations(model, records, name) for name in schema.tte_outcomes}
    report = evaluation.build_report(ss, records, schema, bin_width=cfg["bin_width"],
                                     change_from_baseline=cfg["change_from_baseline"], tte_predictions=tte_pred)
    out = _out_dir(cfg)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    write_config_echo(cfg, out, "evaluate")
    print(f"report for {len(records)} patients written to {out}")
    return EXIT_OK


def gradcheck_suite(seed: int = 0, n: int = 2, m: int = 2, c: int = 2) -> list[tuple[str, float]]:
    """Finite-difference checks of every network and loss on a tiny model; returns (name, max rel. error)."""
    from .datamodel import PatientRecord, TTE, Visit

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = NBMModel(NetConfig(N=n, M=m, C=c, tte_outcomes=("event",)))
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.1 * torch.randn_like(p))
    schema = Schema.simple([f"y{j}" for j in range(n)], [f"c{j}" for j in range(c)], ["event"])
    records = []
    for i in range(2):
        visits = [Visit(float(t), rng.standard_normal(n), np.array([True] * (n - 1) + [i == 0]))
                  for t in (0.0, 1.0, 2.5)]
        records.append(PatientRecord(f"p{i}", rng.standard_normal(c), np.ones(c, dtype=bool), visits,
                                     {"event": TTE(float(rng.uniform(0.5, 3.0)), i == 0)}))
    batch = training.CohortTensors(records, schema).batch(np.arange(len(records)))
    trip = training.triplet_inputs(net, batch)
    x = torch.cat([trip.y_cur, trip.c], dim=-1)
    ctx = nbm.energy_context(net, trip.y0, trip.c, trip.y_cur, trip.t_cur, trip.t_fut)
    y_samp = nbm.gibbs_sample(ctx, 4, np.random.default_rng(seed))
    y_in = torch.as_tensor(rng.standard_normal((3, n + c)))
    mask = torch.as_tensor(rng.random((3, n + c)) > 0.3)

    def group(*prefixes):
        return [p for name, p in net.named_parameters() if name.startswith(prefixes)]

    checks = {
        "imputer": (lambda: net.imputer.reconstruct(y_in, mask).pow(2).sum(), group("imputer")),
        "flow": (lambda: net.g(trip.y0, trip.c, trip.t_fut).sin().sum(), group("flow")),
        "mean_f": (lambda: net.mean_f(trip.y0, trip.c, trip.y_cur, trip.t_cur, trip.t_fut).sin().sum(),
                   group("flow", "corrector", "lambda_f")),
        "weights_W": (lambda: net.weights_W(x, trip.t_cur, trip.t_fut).sin().sum(), group("wnet", "lambda_w")),
        "precision_P": (lambda: net.precision_P(x, trip.t_cur, trip.t_fut).sin().sum(),
                        group("pnet", "lambda_p", "beta")),
        "tte_head": (lambda: net.tte_location("event", trip.y0[:2], trip.c[:2]).sin().sum(), group("tte")),
        "loss_imputer": (lambda: training.loss_imputer(net, batch.y, batch.y_mask, batch.c, batch.c_mask,
                                                       batch.visit_weight), group("imputer")),
        "loss_rbm": (lambda: training.loss_rbm(net, trip, 4, None, y_samp=y_samp), named_params(net)),
        "loss_featurewise_mse": (lambda: training.loss_featurewise_mse(net, trip), group("flow")),
        "loss_consistency": (lambda: training.loss_consistency(net, trip), group("flow")),
        "loss_event": (lambda: training.loss_event(net, batch), group("tte")),
    }
    return [(name, grad_check(fn, params, step=1e-5)) for name, (fn, params) in checks.items()]


def cmd_gradcheck(cfg: dict) -> int:
    results = gradcheck_suite(cfg["seed"])
    ok = True
    print(f"{'check':<24}{'max rel err':>14}  result")
    for name, err in results:
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{name:<24}{err:>14.3e}  {'pass' if passed else 'FAIL'}")
    if cfg["out"] not in (None, "."):
        out = _out_dir(cfg)
        with open(out / "gradcheck.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "max_rel_err", "passed"])
            w.writerows([(n, repr(e), e < GRADCHECK_TOLERANCE) for n, e in results])
        write_config_echo(cfg, out, "gradcheck")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_twin_record(cfg: dict, sampleset_path: str | None, patient: str | None) -> int:
    if sampleset_path is None or not Path(sampleset_path).is_file():
        raise ConfigError("--sampleset must name an existing SampleSet file")
    ss = load_sampleset(sampleset_path)
    if patient is None:
        raise ConfigError("--patient is required")
    if patient not in ss.patient_ids:
        raise DataError(f"patient {patient!r} is not in the SampleSet")
    table = evaluation.twin_record(ss, patient)
    times = [f"{t:g}" for t in ss.times]
    out = _out_dir(cfg)
    path = out / f"twin_record_{patient}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable"] + times)
        for row in table:
            w.writerow([row["variable"]] + [f"{m:.4g} ± {s:.4g}" for m, s in zip(row["mean"], row["std"])])
    write_config_echo(cfg, out, "twin-record")
    with open(path, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtg", description="Digital twin generator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "generate", "evaluate", "gradcheck", "twin-record"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (flat keys)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--model", help="checkpoint file")
        p.add_argument("--times", help='comma separated generation times, e.g. "1,3,6,12"')
        p.add_argument("--samples", type=int, help="twins per patient")
        p.add_argument("--fold", type=int, help="cross-validation fold id")
        if name in ("evaluate", "twin-record"):
            p.add_argument("--sampleset", help="SampleSet file written by generate")
        if name == "twin-record":
            p.add_argument("--patient", help="patient id")
    return parser


def _set_threads() -> None:
    threads = os.environ.get("DTG_THREADS", "1")
    try:
        n = int(threads)
    except ValueError as exc:
        raise ConfigError(f"DTG_THREADS must be an integer, got {threads!r}") from exc
    torch.set_num_threads(max(1, n))


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        overrides = {"seed": args.seed, "out": args.out, "times": args.times, "samples": args.samples,
                     "fold": args.fold}
        if args.command == "gradcheck" and args.seed is None and args.config is None:
            overrides["seed"] = 0
        cfg = resolve_config(args.config, overrides)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "generate":
            return cmd_generate(cfg, args.model)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.sampleset, args.model)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_twin_record(cfg, args.sampleset, args.patient)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.dump, indent=2, default=str), file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
