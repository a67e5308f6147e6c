import json

import numpy as np
import pytest

from dtg import cli, nbm
from dtg.datamodel import load_dataset, Schema


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = {"seed": 7, "synth_patients": 30, "synth_noise_context": 1, "tte_coef": [1.0],
           "schema": "data/schema.json", "visits": "data/visits.csv", "context": "data/context.csv",
           "tte": "data/tte.csv", "epochs": 2, "batch_size": 8, "M": 2, "samples": 6, "times": [1, 2, 4]}
    (root / "run.json").write_text(json.dumps(cfg))
    assert cli.run(["synth", "--config", str(root / "run.json"), "--out", str(root / "data")]) == 0
    assert cli.run(["train", "--config", str(root / "run.json"), "--out", str(root / "model")]) == 0
    return root


def test_synth_outputs(workspace):
    schema = Schema.load(workspace / "data" / "schema.json")
    recs = load_dataset(workspace / "data" / "visits.csv", schema, workspace / "data" / "context.csv",
                        workspace / "data" / "tte.csv")
    assert len(recs) == 30 and schema.C == 2 and tuple(schema.tte_outcomes) == ("event",)
    echo = json.loads((workspace / "data" / "synth.config.json").read_text())
    assert echo["seed"] == 7 and echo["synth_patients"] == 30


def test_train_writes_checkpoint_and_telemetry(workspace):
    out = workspace / "model"
    assert (out / "model.dtg").read_bytes()[:8] == cli.CHECKPOINT_MAGIC
    lines = (out / "telemetry.csv").read_text().splitlines()
    assert lines[0].startswith("epoch") and len(lines) == 3
    assert json.loads((out / "train.config.json").read_text())["epochs"] == 2


def test_checkpoint_round_trip_reproduces_generation(workspace, tmp_path):
    model = cli.load_model(workspace / "model" / "model.dtg")
    cli.save_model(model, tmp_path / "copy.dtg")
    assert (tmp_path / "copy.dtg").read_bytes() == (workspace / "model" / "model.dtg").read_bytes()
    again = cli.load_model(tmp_path / "copy.dtg")
    recs = load_dataset(workspace / "data" / "visits.csv", model.schema, workspace / "data" / "context.csv")
    a = nbm.generate_trajectory(model, recs, [1.0, 3.0], 4, seed=1)
    b = nbm.generate_trajectory(again, recs, [1.0, 3.0], 4, seed=1)
    assert np.array_equal(a.samples, b.samples)


def test_generate_is_byte_deterministic(workspace):
    args = ["generate", "--config", str(workspace / "run.json"), "--model", str(workspace / "model" / "model.dtg")]
    assert cli.run(args + ["--out", str(workspace / "g1")]) == 0
    assert cli.run(args + ["--out", str(workspace / "g2")]) == 0
    b1 = (workspace / "g1" / "samples.dtgs").read_bytes()
    assert b1 == (workspace / "g2" / "samples.dtgs").read_bytes()
    ss = cli.load_sampleset(workspace / "g1" / "samples.dtgs")
    assert ss.samples.shape == (30, 6, 3, 1)
    assert ss.times.tolist() == [1.0, 2.0, 4.0]


def test_generate_flags_override_config(workspace):
    out = workspace / "g3"
    assert cli.run(["generate", "--config", str(workspace / "run.json"), "--model",
                    str(workspace / "model" / "model.dtg"), "--out", str(out), "--times", "1,3",
                    "--samples", "2", "--fold", "1", "--seed", "3"]) == 0
    ss = cli.load_sampleset(out / "samples.dtgs")
    assert ss.samples.shape == (6, 2, 2, 1)
    assert ss.provenance["seed"] == 3


def test_evaluate_and_twin_record(workspace, capsys):
    ss_path = workspace / "g1" / "samples.dtgs"
    if not ss_path.exists():
        cli.run(["generate", "--config", str(workspace / "run.json"), "--model",
                 str(workspace / "model" / "model.dtg"), "--out", str(workspace / "g1")])
    out = workspace / "eval"
    assert cli.run(["evaluate", "--config", str(workspace / "run.json"), "--sampleset", str(ss_path),
                    "--model", str(workspace / "model" / "model.dtg"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["rows"]) == 3 and report["survival"][0]["outcome"] == "event"
    assert cli.run(["twin-record", "--config", str(workspace / "run.json"), "--sampleset", str(ss_path),
                    "--patient", "P00", "--out", str(out)]) == 0
    rows = (out / "twin_record_P00.csv").read_text().splitlines()
    assert len(rows) == 1 + 1 and len(rows[0].split(",")) == 1 + 3
    assert "±" in rows[1]


def test_gradcheck_passes(capsys):
    assert cli.run(["gradcheck", "--seed", "0"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "loss_rbm" in out


def test_gradcheck_failure_exit_code(monkeypatch):
    monkeypatch.setattr(cli, "GRADCHECK_TOLERANCE", 0.0)
    assert cli.run(["gradcheck", "--seed", "0"]) == cli.EXIT_GRADCHECK


def test_config_errors(tmp_path, capsys):
    assert cli.run(["train", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    (tmp_path / "a.json").write_text(json.dumps({"seed": 1, "learning_rate": 3}))
    assert cli.run(["train", "--config", str(tmp_path / "a.json")]) == cli.EXIT_CONFIG
    (tmp_path / "b.json").write_text(json.dumps({"epochs": 1}))
    assert cli.run(["train", "--config", str(tmp_path / "b.json")]) == cli.EXIT_CONFIG
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "visits": "nope.csv", "schema": "nope.json"}))
    assert cli.run(["train", "--config", str(tmp_path / "c.json")]) == cli.EXIT_CONFIG
    (tmp_path / "d.json").write_text(json.dumps({"seed": 1.5}))
    assert cli.run(["synth", "--config", str(tmp_path / "d.json")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path, workspace):
    (tmp_path / "v.csv").write_text("patient_id,time,y0\nA,0,1\nA,0,2\n")
    cfg = {"seed": 1, "schema": str(workspace / "data" / "schema.json"), "visits": str(tmp_path / "v.csv")}
    (tmp_path / "e.json").write_text(json.dumps(cfg))
    assert cli.run(["train", "--config", str(tmp_path / "e.json")]) == cli.EXIT_DATA


def test_numeric_failure_exit_code(workspace, monkeypatch, tmp_path):
    from dtg import training

    def boom(*a, **k):
        raise training.NumericError("non-finite loss", {"epoch": 1})

    monkeypatch.setattr(training, "train", boom)
    assert cli.run(["train", "--config", str(workspace / "run.json"), "--out", str(tmp_path)]) == cli.EXIT_NUMERIC


def test_corrupt_files_are_data_errors(tmp_path):
    (tmp_path / "x.dtg").write_bytes(b"garbage")
    with pytest.raises(cli.DataError):
        cli.load_model(tmp_path / "x.dtg")
    with pytest.raises(cli.DataError):
        cli.load_sampleset(tmp_path / "x.dtg")


def test_dtg_threads_validation(monkeypatch):
    monkeypatch.setenv("DTG_THREADS", "many")
    assert cli.run(["gradcheck", "--seed", "0"]) == cli.EXIT_CONFIG
