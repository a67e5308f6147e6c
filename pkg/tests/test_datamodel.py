import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtg.datamodel import (
    DataError, Normalizer, PatientRecord, Schema, Variable, Visit, build_triplets, fit_normalizer, fold_split,
    load_dataset, split_folds, write_dataset,
)

SCHEMA = Schema.simple(["score", "grip"], ["age"], ["death"])


def record(pid, times, n=2, c=(1.0,)):
    visits = [Visit(t, np.arange(n, dtype=float) + t, np.ones(n, bool)) for t in times]
    return PatientRecord(pid, np.array(c), np.ones(len(c), bool), visits)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_schema_validation():
    with pytest.raises(DataError):
        Schema.simple([], [])
    with pytest.raises(DataError):
        Schema.simple(["a", "a"], [])
    with pytest.raises(DataError):
        Variable("x", "ordinal")
    assert SCHEMA.N == 2 and SCHEMA.C == 1


def test_schema_json_round_trip(tmp_path):
    s = Schema([Variable("a"), Variable("b", "binary")], [Variable("c")], ["death"])
    s.save(tmp_path / "s.json")
    assert Schema.load(tmp_path / "s.json").to_dict() == s.to_dict()


def test_load_basic_and_blank_cells(tmp_path):
    v = write(tmp_path, "v.csv", "patient_id,time,score,grip\nA,0,1.5,2\nA,3,,4\n")
    c = write(tmp_path, "c.csv", "patient_id,age\nA,70\n")
    tte = write(tmp_path, "t.csv", "patient_id,outcome,time,event\nA,death,12,1\n")
    (rec,) = load_dataset(v, SCHEMA, c, tte)
    assert [x.t for x in rec.visits] == [0.0, 3.0]
    assert rec.visits[1].mask.tolist() == [False, True]
    assert np.isnan(rec.visits[1].values[0])
    assert rec.context.tolist() == [70.0]
    assert rec.tte["death"].time == 12.0 and rec.tte["death"].event


@pytest.mark.parametrize("body", [
    "A,-1,1,2\n",
    "A,0,1,2\nA,0,3,4\n",
    "A,0,1,2\nA,3,1,2\nA,1,1,2\n",
])
def test_load_rejects_bad_times(tmp_path, body):
    v = write(tmp_path, "v.csv", "patient_id,time,score,grip\n" + body)
    with pytest.raises(DataError):
        load_dataset(v, SCHEMA)


def test_load_rejects_unknown_column(tmp_path):
    v = write(tmp_path, "v.csv", "patient_id,time,score,weight\nA,0,1,2\n")
    with pytest.raises(DataError):
        load_dataset(v, SCHEMA)


def test_load_requires_baseline(tmp_path):
    v = write(tmp_path, "v.csv", "patient_id,time,score,grip\nA,1,1,2\n")
    with pytest.raises(DataError):
        load_dataset(v, SCHEMA)


def test_write_then_load_round_trip(tmp_path):
    recs = [record("A", [0, 1, 3]), record("B", [0, 2])]
    recs[0].visits[1].mask[1] = False
    write_dataset(recs, Schema.simple(["a", "b"], ["age"]), tmp_path / "v.csv", tmp_path / "c.csv")
    back = load_dataset(tmp_path / "v.csv", Schema.simple(["a", "b"], ["age"]), tmp_path / "c.csv")
    assert [r.id for r in back] == ["A", "B"]
    for r, s in zip(recs, back):
        for v, w in zip(r.visits, s.visits):
            assert v.t == w.t and np.array_equal(v.mask, w.mask)
            assert np.array_equal(v.values[v.mask], w.values[w.mask])


def test_masked_slots_never_read():
    v = Visit(0.0, np.array([1.0, 99.0]), np.array([True, False]))
    assert np.isnan(v.values[1])


def test_triplet_examples():
    trips = build_triplets(record("A", [0, 1, 3]))
    assert [(t.t_cur, t.t_fut) for t in trips] == [(0, 1), (0, 3), (1, 3)]
    assert build_triplets(record("A", [0])) == []
    assert len(build_triplets(record("A", [0, 1, 2, 4, 8]))) == 10


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 5.0), min_size=0, max_size=7))
def test_triplet_count_and_ordering(gaps):
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        return
    rec = record("A", times.tolist())
    trips = build_triplets(rec)
    v = len(times)
    assert len(trips) == v * (v - 1) // 2
    assert all(t.t_cur < t.t_fut for t in trips)
    assert all(t.patient_id == "A" and np.array_equal(t.y0, rec.baseline.values) for t in trips)


def test_normalizer_population_std():
    recs = [PatientRecord("A", [0.0], [True], [Visit(0, [1.0], [True])]),
            PatientRecord("B", [2.0], [True], [Visit(0, [3.0], [True])])]
    norm = fit_normalizer(recs, Schema.simple(["a"], ["c"]))
    assert norm.long_mean.tolist() == [2.0] and norm.long_std.tolist() == [1.0]


def test_normalizer_constant_column_clamps(caplog):
    recs = [PatientRecord("A", [0.0], [True], [Visit(0, [5.0], [True]), Visit(1, [5.0], [True])]),
            PatientRecord("B", [1.0], [True], [Visit(0, [5.0], [True])])]
    norm = fit_normalizer(recs, Schema.simple(["a"], ["c"]))
    assert norm.long_std.tolist() == [1.0]
    assert "zero standard deviation" in caplog.text


def test_normalizer_needs_two_observations():
    recs = [PatientRecord("A", [0.0], [True], [Visit(0, [5.0], [True]), Visit(1, [np.nan], [False])])]
    with pytest.raises(DataError):
        fit_normalizer(recs, Schema.simple(["a"], ["c"]))


def test_normalizer_round_trip_and_binary():
    schema = Schema([Variable("a"), Variable("flag", "binary")], [Variable("c")])
    g = np.random.default_rng(0)
    recs = [PatientRecord(f"P{i}", g.normal(size=1), [True],
                          [Visit(t, [g.normal(3, 2), float(g.integers(2))], [True, True]) for t in (0, 1)])
            for i in range(20)]
    norm = fit_normalizer(recs, schema)
    x = np.array([[1.7, 1.0], [-4.0, 0.0]])
    z = norm.apply_longitudinal(x)
    assert z[0, 1] == 1.0 and z[1, 1] == -1.0
    assert np.allclose(norm.invert_longitudinal(z), x, atol=1e-12)
    again = Normalizer.from_dict(json.loads(json.dumps(norm.to_dict())))
    assert np.array_equal(again.apply_longitudinal(x), z)


@pytest.mark.parametrize("n,sizes", [(10, [2, 2, 2, 2, 2]), (11, [3, 2, 2, 2, 2])])
def test_fold_sizes(n, sizes):
    recs = [record(f"P{i}", [0]) for i in range(n)]
    folds = split_folds(recs, 5, seed=3)
    assert sorted(np.bincount(list(folds.values())).tolist(), reverse=True) == sizes
    assert folds == split_folds(recs, 5, seed=3)


def test_folds_partition_patients():
    recs = [record(f"P{i}", [0]) for i in range(23)]
    folds = split_folds(recs, 5, seed=0)
    seen = set()
    for k in range(5):
        train, held = fold_split(recs, folds, k)
        ids = {r.id for r in held}
        assert not ids & {r.id for r in train} and not ids & seen
        seen |= ids
    assert seen == {r.id for r in recs}


def test_too_few_patients_for_folds():
    with pytest.raises(DataError):
        split_folds([record("A", [0])], 5)
