import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtg import evaluation as ev
from dtg import synth
from dtg.datamodel import Normalizer, PatientRecord, Schema, TTE, Visit
from dtg.networks import NBMModel, NetConfig
from dtg.nbm import SampleSet, TwinModel
from dtg.training import TrainConfig


def balanced(means, spread=1.0):
    # two draws per patient at mean +- spread: per-patient variance spread**2
    return np.array([[m - spread, m + spread] for m in means], dtype=float)


def test_mu_pred_examples():
    assert ev.mu_pred(balanced([1, 3])) == 2.0
    assert ev.mu_pred(np.array([[1.0, 2.0, 6.0]])) == 3.0
    assert ev.mu_pred(np.full((4, 5), 2.5)) == 2.5
    assert ev.mu_pred(np.zeros((0, 3))) is None
    assert ev.mu_pred(balanced([1, 3, 100]), observed=[True, True, False]) == 2.0


def test_sigma_pred_examples():
    assert ev.sigma_pred(balanced([1, 3])) == pytest.approx(math.sqrt(2), abs=1e-15)
    assert ev.sigma_pred(np.full((3, 4), 7.0)) == 0.0
    assert ev.sigma_pred(balanced([1, 3, 8], spread=0.0)) == pytest.approx(np.std([1, 3, 8]), abs=1e-15)
    assert ev.sigma_pred(balanced([1])) is None


def test_rho_pred_examples():
    y = balanced([0, 2])
    z = np.array([[1.0, -1.0], [3.0, 1.0]])  # same means, anti-aligned draws
    within_y = y - y.mean(1, keepdims=True)
    within_z = z - z.mean(1, keepdims=True)
    assert (within_y * within_z).mean(1).tolist() == [-1.0, -1.0]
    # per-patient cov 0 example: shuffle pairing so within-patient covariance vanishes
    y4 = np.array([[-1.0, -1.0, 1.0, 1.0], [1.0, 1.0, 3.0, 3.0]])
    z4 = np.array([[-1.0, 1.0, -1.0, 1.0], [1.0, 3.0, 1.0, 3.0]])
    assert ev.rho_pred(y4, z4) == pytest.approx(0.5, abs=1e-15)
    assert ev.rho_pred(y4, y4) == 1.0
    assert ev.rho_pred(np.ones((3, 2)), np.ones((3, 2))) is None


def test_rho_pred_independent_is_near_zero():
    g = np.random.default_rng(0)
    y, z = g.normal(size=(400, 200)), g.normal(size=(400, 200))
    assert abs(ev.rho_pred(y, z)) < 4 / math.sqrt(400 * 200)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(1, 9)), elements=st.floats(-1e3, 1e3)))
def test_sigma_pred_equals_pooled_std(draws):
    assert ev.sigma_pred(draws) == pytest.approx(draws.std(), abs=1e-9, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 6), st.just(2)), elements=st.floats(-50, 50)))
def test_rho_pred_bounded_and_order_invariant(d):
    r = ev.rho_pred(d[..., 0], d[..., 1])
    if r is not None:
        assert -1.0 <= r <= 1.0
        perm = np.random.default_rng(0).permutation(d.shape[0])
        assert ev.rho_pred(d[perm, :, 0], d[perm, :, 1]) == pytest.approx(r, abs=1e-12)


def test_rho_pred_extreme_scales():
    tiny = np.full((2, 5), 6.57e-139)
    assert ev.rho_pred(tiny, tiny) is None
    tiny[0, 0] *= 1.0000001
    assert ev.rho_pred(tiny, tiny) == 1.0
    big = np.random.default_rng(0).normal(size=(4, 3)) * 1e200
    assert ev.rho_pred(big, big) == 1.0 and ev.rho_pred(big, -big) == -1.0
    assert ev.rho_pred(big, np.full((4, 3), np.inf)) is None


def test_pearson_and_auc_examples():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    assert ev.pearson(x, x) == pytest.approx(1.0)
    assert ev.pearson(x, -x) == pytest.approx(-1.0)
    assert ev.pearson(x[:2], x[:2]) is None
    assert ev.pearson(x, np.ones(4)) is None
    assert ev.auc_binary([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert ev.auc_binary([0, 1], [0.5, 0.5]) == 0.5
    assert ev.auc_binary([1, 1], [0.1, 0.2]) is None


def test_concordance_examples():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    e = np.ones(4, dtype=bool)
    assert ev.concordance_index(t, t, e) == 1.0
    assert ev.concordance_index(-t, t, e) == 0.0
    assert ev.concordance_index(t, t, np.zeros(4, dtype=bool)) is None
    g = np.random.default_rng(0)
    tt = g.exponential(size=2000)
    assert abs(ev.concordance_index(g.normal(size=2000), tt, np.ones(2000, bool)) - 0.5) < 0.02


def test_concordance_horizon_censors_late_events():
    # the late pair is discordant but only comparable without the horizon
    pred = np.array([1.0, 2.0, 4.0, 3.0])
    t = np.array([1.0, 2.0, 10.0, 12.0])
    e = np.ones(4, dtype=bool)
    assert ev.concordance_index(pred, t, e) < 1.0
    assert ev.concordance_index(pred, t, e, horizon=5.0) == 1.0


def test_difference_density_examples():
    grid = np.linspace(-4, 5, 901)
    d = ev.difference_density_from_moments(grid, (0.0, 1.0), (1.0, 1.0))
    crossing = grid[np.argmin(np.abs(d[200:700])) + 200]
    assert crossing == pytest.approx(0.5, abs=0.01)
    assert np.all(ev.difference_density_from_moments(grid, (0.2, 1.3), (0.2, 1.3)) == 0)


def test_quartile_difference_density():
    g = np.random.default_rng(0)
    strat = g.normal(size=200)
    obs = strat + g.normal(size=200)
    twins = obs[:, None] + np.zeros((200, 1))
    dd = ev.quartile_difference_density(obs, twins, strat)
    assert np.allclose(dd.data_difference, dd.twin_difference)
    assert dd.data_top[0] > dd.data_bottom[0]
    assert ev.quartile_difference_density(obs[:7], twins[:7], strat[:7]) is None


def _sampleset(ids, times, samples, baseline=None):
    samples = np.asarray(samples, dtype=float)
    base = np.zeros((len(ids), samples.shape[-1])) if baseline is None else np.asarray(baseline, dtype=float)
    return SampleSet(list(ids), np.asarray(times, float), samples, base, [f"y{j}" for j in range(samples.shape[-1])])


def test_nearest_bin_pairing():
    rec = PatientRecord("A", [0.0], [True], [Visit(0, [1.0], [True]), Visit(2.6, [5.0], [True]), Visit(6.2, [7.0], [True])])
    ss = _sampleset(["A"], [3.0, 6.0], np.zeros((1, 2, 2, 1)))
    v0, base, present = ev.observed_at([rec], ss, 0, 0)
    assert v0[0] == 5.0 and base[0] == 1.0 and present[0]
    v1, _, _ = ev.observed_at([rec], ss, 0, 1)
    assert v1[0] == 7.0
    far = _sampleset(["A"], [12.0], np.zeros((1, 2, 1, 1)))
    assert not ev.observed_at([rec], far, 0, 0)[2][0]


def _toy_records(n=12, seed=0):
    g = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        y0 = g.normal()
        recs.append(PatientRecord(f"P{i}", [g.normal()], [True],
                                  [Visit(0, [y0], [True]), Visit(3, [y0 + g.normal()], [True])],
                                  {"death": TTE(float(g.exponential()), bool(i % 3))}))
    return recs


def test_build_report_structure_and_identities(tmp_path):
    recs = _toy_records()
    g = np.random.default_rng(1)
    obs = np.array([r.visits[1].values[0] for r in recs])
    base = np.array([[r.baseline.values[0]] for r in recs])
    draws = obs[:, None, None, None] + g.normal(size=(12, 50, 1, 1))
    ss = _sampleset([r.id for r in recs], [3.0], draws, base)
    schema = Schema.simple(["y0"], ["c0"], ["death"])
    pred = np.array([r.tte["death"].time for r in recs])
    rep = ev.build_report(ss, recs, schema, cohorts={"all": {r.id for r in recs}, "half": {r.id for r in recs[:6]}},
                          tte_predictions={"death": pred}, horizons=(None, 0.5))
    row = rep.lookup("y0", 3.0)
    assert row["n_obs"] == 12
    assert row["pred_std"] == pytest.approx(ev.sigma_pred(draws[:, :, 0, 0] - base))
    assert row["pearson"] > 0.7
    assert rep.lookup("y0", 3.0, "half")["n_obs"] == 6
    assert rep.survival[0]["concordance"] == 1.0
    rep.to_csv(tmp_path / "r.csv")
    rep.to_json(tmp_path / "r.json")
    assert (tmp_path / "r.csv").read_text().count("\n") == 3


def test_twin_record_table():
    samples = np.arange(2 * 4 * 3 * 2, dtype=float).reshape(2, 4, 3, 2)
    ss = _sampleset(["A", "B"], [1, 2, 3], samples)
    table = ev.twin_record(ss, "B")
    assert len(table) == 2 and all(len(r["mean"]) == 3 for r in table)
    assert table[0]["mean"][0] == samples[1, :, 0, 0].mean()


def test_mask_feature():
    recs = _toy_records(3)
    schema = Schema.simple(["y0"], ["c0"])
    masked = ev.mask_feature(recs, schema, "y0")
    assert not masked[0].baseline.mask[0] and masked[0].visits[1].mask[0]
    assert not ev.mask_feature(recs, schema, "c0")[0].context_mask[0]
    with pytest.raises(KeyError):
        ev.mask_feature(recs, schema, "zz")


def test_input_sensitivity_constant_feature_is_zero():
    spec = synth.ou_1d()
    recs = synth.gen_cohort(spec, 30, seed=0, n_noise_context=1)
    for r in recs:
        r.context[1] = 0.0
    schema = synth.cohort_schema(spec, 1)
    torch.manual_seed(0)
    net = NBMModel(NetConfig(N=1, M=2, C=2))
    # make the imputer fill the constant column with its own value, so masking it changes nothing
    with torch.no_grad():
        net.imputer.decoder[1].linear.weight.zero_()
        net.imputer.decoder[1].linear.bias.zero_()
    model = TwinModel(schema, Normalizer.identity(schema), net)
    delta = ev.input_sensitivity(model, recs, "noise0", "y0", 1.0, n_samples=20, seed=0)
    assert delta == pytest.approx(0.0, abs=1e-12)


def test_cross_validate_audit():
    spec = synth.ou_1d()
    recs = synth.gen_cohort(spec, 25, seed=0, n_noise_context=1)
    schema = synth.cohort_schema(spec, 1)
    res = ev.cross_validate(recs, schema, NetConfig(N=1, M=2, C=2), TrainConfig(epochs=1, batch_size=8),
                            times=[1.0, 2.0], n_samples=5, seed=0)
    assert sorted(res.samples.patient_ids) == sorted(r.id for r in recs)
    for fold, seen in enumerate(res.training_ids):
        held = {i for i, f in res.fold_of.items() if f == fold}
        assert not held & seen
    again = ev.cross_validate(recs, schema, NetConfig(N=1, M=2, C=2), TrainConfig(epochs=1, batch_size=8),
                              times=[1.0, 2.0], n_samples=5, seed=0)
    assert np.array_equal(res.samples.samples, again.samples.samples)
    assert res.report.lookup("y0", 1.0)["n_obs"] > 0
