import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from routine_relapse.predictor.evaluation import (Grids, f2_score, feature_correlations, lopo_evaluate,
                                                  metrics, personalization_subset, random_baseline,
                                                  select_features, tune_hyperparameters)
from routine_relapse.predictor.features import (SampleTable, baseline_feature_names, build_sample_table,
                                                clustering_feature_names, extract_clustering_features,
                                                template_features, transitions_and_states)
from routine_relapse.predictor.forest import BrfModel, fit_brf
from routine_relapse.predictor.quantize import bin_indices, fit_quantizer, quantize
from routine_relapse.predictor.windows import make_window_samples, relapse_label
from routine_relapse.templates import DailyTemplate, PatientRecord

D0 = dt.date(2021, 3, 1)


def record(n_days, relapse_days=(), pid="p", age=30.0):
    tpl = [DailyTemplate(pid, D0 + dt.timedelta(days=i), np.zeros((21, 24)), np.zeros((21, 24), bool))
           for i in range(n_days)]
    rel = [D0 + dt.timedelta(days=r - 1) for r in relapse_days]
    return PatientRecord(pid, age, 12.0, tpl, relapse_events=rel)


def brute_label(end_day, relapses):
    pred = set(range(end_day + 1, end_day + 8))
    return int(any(pred & set(range(r - 27, r + 1)) for r in relapses))


# --- windows ----------------------------------------------------------------

def test_window_ends_for_70_days():
    assert [s.end_day for s in make_window_samples([record(70)])] == [28, 35, 42, 49, 56, 63]


def test_relapse_day_60_labels():
    samples = make_window_samples([record(100, [60])])
    for s in samples:
        inside = any(33 <= d <= 60 for d in s.prediction_days)
        assert s.label == int(inside)
    assert [s.end_day for s in samples if s.label] == [28, 35, 42, 49, 56]


def test_no_relapse_all_negative_and_short_record_skipped():
    assert all(s.label == 0 for s in make_window_samples([record(90)]))
    assert make_window_samples([record(34)]) == []


@given(st.integers(28, 200), st.lists(st.integers(1, 250), max_size=4))
def test_label_rule_matches_day_enumeration(end_day, relapses):
    assert relapse_label(end_day, relapses) == brute_label(end_day, relapses)


# --- features ---------------------------------------------------------------

def test_feature_name_counts():
    names = baseline_feature_names()
    assert len(names) == 110 and len(set(names)) == 110
    assert sum(n.startswith("ema") for n in names) == 20
    assert len(clustering_feature_names("gmm")) == 8 and len(clustering_feature_names("pam")) == 10


def test_constant_modality_features():
    f = template_features(np.full((28, 24), 0.4), np.ones((28, 24), bool), np.arange(28))
    for k in ("std", "range", "skewness", "kurtosis", "rhythm_halves", "rhythm_halves_weighted",
              "rhythm_max_vs_mean", "std_template_mean", "daily_std"):
        assert f[k] == pytest.approx(0.0, abs=1e-12), k
    assert f["mean"] == pytest.approx(0.4)


def test_daily_average_mean_and_population_std():
    values = np.stack([np.full(24, 1.0), np.full(24, 3.0)])
    f = template_features(values, np.ones((2, 24), bool), np.array([0, 20]))
    assert f["daily_mean"] == pytest.approx(2.0) and f["daily_std"] == pytest.approx(1.0)


def test_clustering_feature_examples():
    assert transitions_and_states([1, 1, 2, 2, 1]) == (2, 2)
    f = extract_clustering_features("pam", [4, 4, 4], {"assigned_distance": [1, 1, 1],
                                                       "weighted_distance": [2, 2, 2],
                                                       "dtw_prev_day": [np.nan, 1, 3]})
    assert f["std_pam_label"] == 0 and f["pam_transitions"] == 0 and f["pam_states"] == 1
    assert f["mean_pam_dtw_prev_day"] == 2.0
    g = extract_clustering_features("gmm", [1, 3], {"assigned_likelihood": [0.5, 0.5],
                                                    "weighted_likelihood": [0.1, 0.3]})
    assert g["mean_gmm_label"] == 2.0
    assert extract_clustering_features("gmm", [], {}) == {}


def test_transitions_ignore_gaps():
    assert transitions_and_states([1, 2, 1], days=[1, 2, 5]) == (1, 2)


def test_sample_table_on_synthetic(tiny_synth):
    cohort = tiny_synth.cohort
    samples = make_window_samples(cohort)
    table = build_sample_table(cohort, samples)
    assert table.X.shape == (len(samples), 110)
    assert np.isfinite(table.X).all()
    gmm = pd.DataFrame([{"patient_id": p.patient_id, "date": t.date, "label": 1,
                         "assigned_likelihood": 0.5, "weighted_likelihood": 0.25}
                        for p in cohort for t in p.templates])
    both = build_sample_table(cohort, samples, gmm_scores=gmm)
    assert both.X.shape[1] == 118 and set(both.groups) == {"baseline", "gmm"}
    assert both.select("gmm").X.shape[1] == 8


# --- quantizer --------------------------------------------------------------

def test_quantizer_examples():
    spec = fit_quantizer(np.array([[0.0], [1.0]]), 2)
    assert quantize(spec, [[0.7]]).tolist() == [[0.0, 1.0]]
    assert quantize(spec, [[0.0]]).tolist() == [[1.0, 0.0]]
    assert quantize(spec, [[1.5]]).tolist() == [[0.0, 1.0]]
    assert quantize(spec, [[-3.0]]).tolist() == [[1.0, 0.0]]


def test_quantizer_drops_constant():
    spec = fit_quantizer(np.array([[1.0, 0.0], [1.0, 2.0]]), 3)
    assert spec.dropped == ("f0",) and spec.width == 3


@given(arrays(np.float64, (12, 3), elements=st.floats(-100, 100)), st.sampled_from([2, 3, 4, 5, 10, 15]),
       arrays(np.float64, (5, 3), elements=st.floats(-200, 200)))
def test_onehot_blocks_sum_to_one(train, bins, test):
    spec = fit_quantizer(train, bins)
    assert np.all(np.diff(spec.edges, axis=1) > 0)
    q = quantize(spec, test).reshape(5, len(spec.names), bins)
    assert np.all(q.sum(axis=2) == 1)
    idx = bin_indices(spec, test)
    assert idx.min(initial=0) >= 0 and idx.max(initial=0) < bins


# --- personalization and selection -----------------------------------------

def test_personalization_age_order():
    pids = np.array(["a", "a", "b", "b", "c", "c"])
    ages = np.array([29, 29, 45, 45, 31, 31])
    labels = np.array([0, 0, 1, 0, 0, 0])
    assert personalization_subset(pids, ages, labels, 30, 3).tolist() == [0, 1, 2, 4, 5]  # 29, 31, plus b's positive
    assert personalization_subset(pids, ages, labels, 30, 100).tolist() == list(range(6))


def test_personalization_age_ties_by_id():
    pids = np.array(["z", "m"])
    got = personalization_subset(pids, np.array([28, 32]), np.array([0, 0]), 30, 1)
    assert got.tolist() == [1]


def test_select_features(rng):
    y = np.array([0, 1] * 20)
    X = np.column_stack([rng.normal(size=40), np.full(40, 3.0), y + 0.5 * rng.normal(size=40), y])
    assert select_features(X, y, 1).tolist() == [3]
    assert select_features(X, y, 2).tolist() == [2, 3]
    assert feature_correlations(X, y)[1] == 0.0
    assert select_features(X, y, 10).tolist() == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        select_features(X, np.zeros(40), 2)


# --- forest -----------------------------------------------------------------

def test_brf_separable_and_balanced(rng):
    X = rng.random((60, 4))
    y = (X[:, 1] > 0.7).astype(int)
    m = fit_brf(X, y, seed=3)
    assert m.n_trees == 11
    assert np.all(m.predict(X)[y == 1] == 1)
    counts = m.bootstrap_class_counts(y)
    assert np.all(counts[:, 0] == counts[:, 1]) and np.all(counts[:, 1] == y.sum())
    p = m.predict_proba(rng.random((30, 4)) * 3 - 1)
    assert np.all((p >= 0) & (p <= 1))


def test_brf_binary_kernel_matches_semantics(rng):
    X = (rng.random((80, 12)) < 0.4).astype(float)
    y = (X[:, 0].astype(bool) | X[:, 5].astype(bool)).astype(int)
    m = fit_brf(X, y, seed=0)
    assert np.all(m.predict(X)[y == 1] == 1)
    assert np.array_equal(m.predict_proba(X), fit_brf(X, y, seed=0).predict_proba(X))


def test_brf_deterministic(rng):
    X = rng.random((50, 3))
    y = rng.integers(0, 2, 50)
    a, b = fit_brf(X, y, seed=9), fit_brf(X, y, seed=9)
    for f in ("feature", "threshold", "left", "right", "n_pos", "n_tot", "bootstrap"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    with pytest.raises(ValueError):
        fit_brf(X, np.zeros(50, int))


def test_two_stump_forest_averages():
    leaf = np.array([[-1], [-1]])
    m = BrfModel(leaf, np.zeros((2, 1)), np.zeros((2, 1), int), np.zeros((2, 1), int),
                 np.array([[3], [0]]), np.array([[3], [3]]), np.array([1, 1]), np.zeros((2, 2), int), 1, 1)
    assert m.predict_proba([[0.2]]).tolist() == [0.5]


# --- metrics and baseline ---------------------------------------------------

def test_metrics_examples():
    assert f2_score(0.063, 0.662) == pytest.approx(0.228, abs=5e-4)
    assert f2_score(0.4, 0.4) == pytest.approx(0.4)
    assert metrics(0, 5, 3) == (0.0, 0.0, 0.0)
    assert metrics(0, 0, 0) == (0.0, 0.0, 0.0)
    p, r, f = metrics(3, 7, 2)
    assert (p, r) == (0.3, 0.6) and f == pytest.approx(5 * 0.18 / (1.2 + 0.6))


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f2_recomputable(tp, fp, fn):
    p, r, f = metrics(tp, fp, fn)
    assert abs(f - f2_score(p, r)) <= 1e-9 and 0 <= f <= 1


def test_random_baseline():
    assert random_baseline(np.zeros(40, int), trials=100) == (0.0, 0.0)
    y = (np.arange(300) % 10 == 0).astype(int)
    m1, s1 = random_baseline(y, 1000, seed=1)
    m2, s2 = random_baseline(y, 1000, seed=2)
    assert abs(m1 - m2) <= 3 * np.sqrt(s1 ** 2 / 1000 + s2 ** 2 / 1000)
    assert random_baseline(y, 200, seed=7) == random_baseline(y, 200, seed=7)


# --- tuning and LOPO --------------------------------------------------------

def toy_table(rng, n_patients=6, per=12, oracle=True, n_noise=4):
    rows, X = [], []
    for i in range(n_patients):
        for j in range(per):
            label = int(i % 2 == 0 and j >= per - 4)
            rows.append((f"q{i}", j, D0 + dt.timedelta(days=7 * j), label, 25.0 + 3 * i, False))
            X.append(list(rng.normal(size=n_noise)) + ([float(label)] if oracle else []))
    meta = pd.DataFrame(rows, columns=["patient_id", "end_day", "window_end", "label", "age", "flagged"])
    names = [f"noise{k}" for k in range(n_noise)] + (["oracle"] if oracle else [])
    return SampleTable(meta, np.array(X), names)


SMALL = Grids(n_bins=(2, 3), subset_size=(20, 40), n_features=(1, 3), inner_folds=3)


def test_tuning_single_point_and_deterministic(rng):
    t = toy_table(rng)
    pids, ages = t.meta["patient_id"].to_numpy(), t.meta["age"].to_numpy(float)
    one = Grids(n_bins=(4,), subset_size=(50,), n_features=(3,), inner_folds=3)
    assert tune_hyperparameters(t.X, t.y, pids, ages, 30.0, one, seed=1)[0] == (4, 50, 3)
    a = tune_hyperparameters(t.X, t.y, pids, ages, 30.0, SMALL, seed=4)
    assert a == tune_hyperparameters(t.X, t.y, pids, ages, 30.0, SMALL, seed=4)


def test_tuning_planted_winner():
    # negatives at the range ends, positives in the middle: only three bins isolate them
    y = np.array([0, 1, 0] * 30)
    X = np.where(y == 1, 0.5, np.tile([0.0, 1.0], 45)[:90])[:, None]
    pids = np.repeat([f"s{i}" for i in range(9)], 10)
    grids = Grids(n_bins=(2, 3), subset_size=(None,), n_features=(1,), inner_folds=5)
    (b, _, _), scores = tune_hyperparameters(X, y, pids, np.zeros(90), None, grids, seed=0,
                                             personalization=False)
    assert b == 3 and scores[(3, None, 1)] == 1.0 > scores[(2, None, 1)]


def test_lopo_oracle_feature(rng):
    rep = lopo_evaluate(toy_table(rng), grids=SMALL, seed=0)
    assert rep.f2 == 1.0 and rep.fn == 0 and rep.fp == 0
    assert rep.selection_frequency["oracle"] == 1.0
    assert all(0 <= v <= 1 for v in rep.selection_frequency.values())
    for fold in rep.folds:
        assert fold["leaked_train"] == fold["leaked_subset"] == fold["leaked_quantizer"] == 0
        assert fold["bootstrap_balanced"] and fold["onehot_ok"]
    assert abs(rep.f2 - f2_score(rep.precision, rep.recall)) <= 1e-9


def test_lopo_without_personalization_and_thread_independence(rng):
    t = toy_table(rng)
    a = lopo_evaluate(t, personalization=False, grids=SMALL, seed=2)
    b = lopo_evaluate(t, personalization=False, grids=SMALL, seed=2, threads=2)
    assert a.to_dict() == b.to_dict()
    assert all(f["subset_size"] is None for f in a.folds)


def test_lopo_needs_positives(rng):
    t = toy_table(rng)
    t.meta["label"] = 0
    with pytest.raises(ValueError):
        lopo_evaluate(t, grids=SMALL)
