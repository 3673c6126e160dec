import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_delta
from routine_relapse.analytics import (cliffs_delta, cluster_profiles, cluster_spread, effect_report,
                                       is_non_negligible, nr_boxplot_data, partition_near_relapse,
                                       summarize_clusters)

D0 = dt.date(2020, 1, 1)
groups = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=12)


def day(i):
    return D0 + dt.timedelta(days=i)


# --- clusters ---------------------------------------------------------------

def test_spread_examples(rng):
    assert cluster_spread([1, 1, 1], np.ones((3, 4))) == {1: 0.0}
    assert cluster_spread([1, 1], [0.0, 2.0]) == {1: pytest.approx(2.0)}
    assert cluster_spread([1, 2, 2], [5.0, 0.0, 2.0]) == {1: 0.0, 2: pytest.approx(2.0)}
    X = rng.normal(size=(20, 3))
    perm = rng.permutation(20)
    assert cluster_spread(np.zeros(20), X)[0] == pytest.approx(cluster_spread(np.zeros(20), X[perm])[0])


def test_spread_trace_identity(rng):
    X = rng.normal(size=(30, 4)) * [1, 2, 3, 4]
    assert cluster_spread(np.zeros(30), X)[0] == pytest.approx(np.trace(np.cov(X.T)))


def test_profiles_mean_and_mask():
    V = np.zeros((3, 2, 24))
    V[0, 0, 9], V[1, 0, 9], V[2, 0, 9] = 2.0, 4.0, 100.0
    M = np.zeros(V.shape, bool)
    M[2] = True
    prof = cluster_profiles([1, 1, 1], V, M)
    assert prof[1][0, 9] == pytest.approx(3.0)
    assert cluster_profiles([1, 2, 2], V, M)[1][0, 9] == 2.0
    allmasked = cluster_profiles([1], V[2:], M[2:])[1]
    assert np.all(allmasked == 0)


def test_summary_descending_size(rng):
    labels = np.array([3, 1, 1, 2, 2, 2])
    V = rng.random((6, 2, 24))
    s = summarize_clusters(labels, rng.normal(size=(6, 2)), V, assigned=np.arange(6.0))
    assert s.order == [2, 1, 3]
    assert s.table["size"].sum() == 6
    assert list(s.profiles) == [2, 1, 3]
    np.testing.assert_allclose(s.profiles[3], V[0])
    assert s.table.set_index("label").loc[1, "mean_assigned"] == pytest.approx(1.5)


# --- Cliff's delta ----------------------------------------------------------

def test_delta_examples():
    assert cliffs_delta([3, 4], [1, 2]) == 1.0
    assert cliffs_delta([1, 2], [0, 3]) == 0.0
    assert cliffs_delta([1, 2, 3], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        cliffs_delta([], [1])


def test_delta_matches_enumeration_on_random_pairs():
    r = np.random.default_rng(0)
    for _ in range(200):
        a = r.integers(0, 6, size=r.integers(1, 15)).astype(float)
        b = r.integers(0, 6, size=r.integers(1, 15)).astype(float)
        assert cliffs_delta(a, b) == brute_force_delta(a, b)


@given(groups, groups)
def test_delta_antisymmetric_and_bounded(a, b):
    d = cliffs_delta(a, b)
    assert -1 <= d <= 1
    assert d == -cliffs_delta(b, a)


@given(groups, groups)
def test_delta_monotone_invariant(a, b):
    f = lambda v: np.exp(np.asarray(v) / 3.0) * 7 - 2  # noqa: E731
    assert cliffs_delta(f(a), f(b)) == pytest.approx(cliffs_delta(a, b), abs=1e-12)


def test_threshold_is_strict():
    assert not is_non_negligible(0.147) and is_non_negligible(-0.148)


# --- partitions -------------------------------------------------------------

def test_partition_window():
    days = [day(i) for i in range(120)]
    (p,) = partition_near_relapse(days, [day(100)], 7)
    assert p.nr_days == tuple(day(i) for i in range(93, 100))
    assert p.pre_nr_days == tuple(day(i) for i in range(93))
    assert not p.truncated
    assert partition_near_relapse(days, [], 7) == []


def test_two_relapses_are_independent_events():
    days = [day(i) for i in range(120)]
    p1, p2 = partition_near_relapse(days, [day(40), day(85)], 14)
    assert set(p1.nr_days).isdisjoint(p1.pre_nr_days)
    assert p2.nr_days == tuple(day(i) for i in range(71, 85))
    assert min(p2.pre_nr_days) > day(40)  # nothing from the first event
    assert all(d < p2.relapse for d in p2.nr_days + p2.pre_nr_days)


def test_partition_truncated_when_days_missing():
    days = [day(i) for i in range(50) if i not in (46, 47)]
    (p,) = partition_near_relapse(days, [day(50)], 7)
    assert len(p.nr_days) == 5 and p.truncated


# --- effect report ----------------------------------------------------------

def score_frame(shift=0.0, relapse_at=60, n=90, seed=0):
    r = np.random.default_rng(seed)
    rows = []
    for pid in ("a", "b"):
        vals = r.random(n)
        for i in range(n):
            v = vals[i] + (shift if relapse_at - 20 <= i < relapse_at else 0.0)
            rows.append({"patient_id": pid, "date": day(i), "w": v, "c": 0.5})
    return pd.DataFrame(rows), {"a": [day(relapse_at)], "b": [day(relapse_at)], "z": []}


def test_planted_shift_gives_full_dominance():
    df, rel = score_frame(shift=1.0)
    rep = effect_report(df, rel, ["w"], xs=[20])
    assert rep.mean_delta("w", 20) == 1.0
    assert bool(rep.summary["non_negligible"].iloc[0])
    assert len(rep.events) == 2 and set(rep.events["delta"]) == {1.0}


def test_identical_distributions_flag_false():
    df, rel = score_frame()
    rep = effect_report(df, rel, ["c"], xs=[7, 14])
    assert (rep.summary["mean_delta"] == 0).all() and not rep.summary["non_negligible"].any()


def test_empty_side_skipped():
    df, rel = score_frame(relapse_at=5)
    rep = effect_report(df, rel, ["w"], xs=[7])
    row = rep.summary.iloc[0]
    assert row["n_events"] == 0 and row["n_skipped"] == 2 and np.isnan(row["mean_delta"])


def test_boxplot_data_groups():
    df, rel = score_frame(shift=1.0)
    box = nr_boxplot_data(df, rel, ["w"], xs=[20])
    assert (box["group"] == "NR").sum() == 40
    assert box.loc[box["group"] == "NR", "value"].min() >= 1.0
