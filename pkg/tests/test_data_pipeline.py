import datetime as dt
import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from routine_relapse.mobility import compute_mobility_modalities, haversine_km
from routine_relapse.pca import RankError, fit_pca, project
from routine_relapse.registry import ModalityRegistry, RegistryError, default_registry
from routine_relapse.templates import (Cohort, DailyTemplate, IngestError, PatientRecord, RawObservation,
                                       build_daily_template, flatten, ingest_observations, merge_relapse_events,
                                       normalize_per_patient, normalize_values, templates_from_frame, unflatten)

REG = default_registry()
DAY = dt.date(2015, 3, 2)


def obs(modality, start_h, end_h, value, pid="p1", day=DAY):
    base = dt.datetime.combine(day, dt.time())
    return RawObservation(pid, base + dt.timedelta(hours=start_h), base + dt.timedelta(hours=end_h), modality, value)


# --- registry -------------------------------------------------------------

def test_registry_has_21_modalities_with_classes():
    assert len(REG) == 21
    assert REG.is_additive("distance_traveled") and REG.is_additive("call_duration")
    assert not REG.is_additive("ambient_light") and not REG.is_additive("acceleration")


def test_registry_rejects_duplicates():
    with pytest.raises(RegistryError):
        ModalityRegistry.from_mapping({"modalities": [{"name": "a", "kind": "additive"},
                                                      {"name": "a", "kind": "intensity"}]})


# --- ingestion ------------------------------------------------------------

def test_empty_stream_gives_empty_cohort():
    assert len(ingest_observations([])) == 0


def test_two_rows_one_patient_one_day():
    c = ingest_observations([obs("ambient_light", 9, 9.5, 2.0), obs("ambient_light", 10, 10.2, 3.0)])
    assert len(c) == 1 and len(c.patients[0].templates) == 1


def test_three_patients_ids_preserved():
    rows = [obs("acceleration", 1, 2, 1.0, pid=p) for p in ("b", "a", "c", "a")]
    c = ingest_observations(rows)
    assert [p.patient_id for p in c] == ["a", "b", "c"]


def test_unknown_modality_rejected_with_diagnostic(caplog):
    rejected = []
    with caplog.at_level(logging.WARNING):
        c = ingest_observations([obs("telepathy", 1, 2, 1.0), obs("acceleration", 1, 2, 1.0)], rejected=rejected)
    assert len(rejected) == 1 and "telepathy" in rejected[0]
    assert c.n_days == 1


def test_malformed_timestamp_is_parse_error():
    with pytest.raises(IngestError):
        RawObservation("p", "2015-13-45T00:00", "2015-01-01T01:00", "acceleration", 1.0)


# --- templates ------------------------------------------------------------

def test_additive_value_split_across_spanned_hours():
    t = build_daily_template([obs("distance_traveled", 8, 12, 4.0)])
    m = REG.index("distance_traveled")
    assert np.allclose(t.values[m, 8:12], 1.0)
    assert t.values[m].sum() == pytest.approx(4.0)
    assert t.missing_mask[m, 7] and t.missing_mask[m, 12]


def test_same_hour_readings_averaged():
    t = build_daily_template([obs("ambient_light", 9, 9.1, 2.0), obs("ambient_light", 9.5, 9.6, 4.0)])
    assert t.values[REG.index("ambient_light"), 9] == pytest.approx(3.0)


def test_intensity_copied_to_each_spanned_hour():
    t = build_daily_template([obs("ambient_sound", 13, 16, 0.7)])
    assert np.allclose(t.values[REG.index("ambient_sound"), 13:16], 0.7)


def test_no_rows_all_masked():
    t = build_daily_template([], date=DAY, patient_id="p")
    assert t.missing_mask.all() and not t.values.any()
    assert t.values.shape == (21, 24) and t.flatten().shape == (504,)


def test_past_midnight_truncated_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        t = build_daily_template([obs("distance_traveled", 22, 26, 4.0)])
    assert "midnight" in caplog.text
    assert np.allclose(t.values[REG.index("distance_traveled"), 22:24], 2.0)


@given(st.lists(st.tuples(st.floats(0, 23.5), st.floats(0.01, 6), st.floats(0, 50)), min_size=1, max_size=12))
def test_additive_totals_conserved(spans):
    rows = [obs("call_duration", s, min(s + d, 24.0), v) for s, d, v in spans]
    t = build_daily_template(rows)
    assert t.values[REG.index("call_duration")].sum() == pytest.approx(sum(v for _, _, v in spans), abs=1e-9)


def test_frame_ingestion_matches_row_ingestion(rng):
    rows = []
    for _ in range(200):
        pid = f"p{rng.integers(3)}"
        day = DAY + dt.timedelta(days=int(rng.integers(3)))
        s = float(rng.uniform(0, 22))
        rows.append(obs(REG.names[int(rng.integers(21))], s, s + float(rng.uniform(0.1, 3)),
                        float(rng.uniform(0, 5)), pid, day))
    by_rows = ingest_observations(rows)
    frame = pd.DataFrame({"patient_id": [r.patient_id for r in rows], "start": [r.start.isoformat() for r in rows],
                          "end": [r.end.isoformat() for r in rows], "modality": [r.modality for r in rows],
                          "value": [r.value for r in rows]})
    by_frame = templates_from_frame(frame)
    for p in by_rows:
        got = by_frame[p.patient_id]
        assert [t.date for t in got] == p.dates
        for a, b in zip(got, p.templates):
            assert np.allclose(a.values, b.values, atol=1e-12) and np.array_equal(a.missing_mask, b.missing_mask)


def test_flatten_is_modality_major_bijection(rng):
    grid = rng.random((21, 24))
    v = flatten(grid)
    assert v[24 * 3 + 5] == grid[3, 5]
    assert np.array_equal(unflatten(v, 21), grid)


def test_relapses_within_28_days_merge():
    d0 = dt.date(2015, 1, 1)
    merged = merge_relapse_events([d0, d0 + dt.timedelta(days=20), d0 + dt.timedelta(days=60)])
    assert merged == (d0, d0 + dt.timedelta(days=60))


def test_patient_record_invariants():
    t = DailyTemplate("p", DAY, np.zeros((21, 24)), np.ones((21, 24), bool))
    with pytest.raises(ValueError):
        PatientRecord("p", templates=(t, t))
    with pytest.raises(ValueError):
        PatientRecord("p", age=0)
    with pytest.raises(ValueError):
        PatientRecord("p", ema={DAY: np.zeros(9)})


# --- normalization --------------------------------------------------------

def _patient(values, mask=None):
    values = np.asarray(values, float)
    mask = np.zeros_like(values, bool) if mask is None else mask
    ts = [DailyTemplate("p", DAY + dt.timedelta(days=i), v, m) for i, (v, m) in enumerate(zip(values, mask))]
    return Cohort((PatientRecord("p", templates=tuple(ts)),))


def test_normalize_by_hand():
    vals = np.zeros((3, 21, 24))
    vals[:, 0, 0] = [2, 4, 6]
    mask = np.ones((3, 21, 24), bool)
    mask[:, 0, 0] = False
    vals[mask] = 0
    out = normalize_per_patient(_patient(vals, mask)).patients[0]
    assert [t.values[0, 0] for t in out.templates] == [0.0, 0.5, 1.0]


def test_normalize_fixed_point_and_constant():
    vals = np.zeros((2, 21, 24))
    vals[0, 1] = np.linspace(0, 1, 24)
    vals[:, 2] = 5.0
    out = normalize_values(vals, np.zeros_like(vals, bool))
    assert np.allclose(out[:, 1], vals[:, 1])
    assert not out[:, 2].any()


@given(arrays(np.float64, (3, 21, 24), elements=st.floats(-1e3, 1e3)), arrays(bool, (3, 21, 24)))
def test_normalized_values_in_unit_interval(vals, mask):
    out = normalize_values(np.where(mask, 0.0, vals), mask)
    assert out.min() >= 0 and out.max() <= 1
    assert not out[mask].any()


def test_normalize_empty_cohort_errors():
    with pytest.raises(ValueError):
        normalize_per_patient(Cohort(()))


# --- PCA ------------------------------------------------------------------

def test_pca_full_rank_reconstruction(rng):
    X = rng.normal(size=(560, 504))
    m = fit_pca(X, q=504)
    assert np.abs(m.inverse_transform(m.transform(X)) - X).max() < 1e-8
    assert np.allclose(m.components @ m.components.T, np.eye(504), atol=1e-8)


def test_pca_line_y_equals_x():
    t = np.linspace(-3, 3, 50)
    m = fit_pca(np.c_[t, t], q=1)
    assert np.allclose(m.components[0], [2 ** -0.5, 2 ** -0.5])
    assert m.explained_variance_ratio[0] == pytest.approx(1.0)


@given(arrays(np.float64, (12, 6), elements=st.floats(-10, 10)))
def test_pca_ratios_non_increasing(X):
    X = X + np.arange(72).reshape(12, 6) * 1e-3  # keep rank away from zero
    r = np.linalg.matrix_rank(X - X.mean(0))
    m = fit_pca(X, q=int(r))
    assert np.all(np.diff(m.explained_variance_ratio) <= 1e-12)
    assert m.explained_variance_ratio.sum() <= 1 + 1e-9


def test_pca_rank_error_names_rank():
    X = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
    with pytest.raises(RankError, match="rank 1"):
        fit_pca(X, q=2)


def test_project_centering_and_contraction(rng):
    X = rng.random((80, 504))
    m = fit_pca(X, q=20)
    mean_t = DailyTemplate("p", DAY, m.mean.reshape(21, 24), np.zeros((21, 24), bool))
    assert np.allclose(project(m, mean_t).coords, 0.0)
    t = DailyTemplate("p", DAY, X[3].reshape(21, 24), np.zeros((21, 24), bool))
    e = project(m, t)
    assert e.coords.shape == (20,)
    assert np.linalg.norm(e.coords) <= np.linalg.norm(X[3] - m.mean) + 1e-9


# --- mobility -------------------------------------------------------------

def test_stationary_fixes():
    rows = [(f"2015-03-02T{h:02d}:00:00", 40.0, -73.0) for h in range(24)]
    f = compute_mobility_modalities(rows)
    r = f.loc[DAY]
    assert r.distance_from_home == pytest.approx(0.0, abs=1e-9)
    assert r.total_movement == pytest.approx(0.0, abs=1e-9)
    assert r.time_at_home == pytest.approx(23.0)


def test_two_fixes_one_km_apart():
    dlat = 1.0 / 111.195
    rows = [("2015-03-02T02:00:00", 40.0, -73.0), ("2015-03-02T03:00:00", 40.0 + dlat, -73.0)]
    f = compute_mobility_modalities(rows)
    assert f.loc[DAY, "total_movement"] == pytest.approx(1.0, rel=0.01)
    assert haversine_km(40.0, -73.0, 40.0 + dlat, -73.0) == pytest.approx(1.0, rel=0.01)


def test_empty_day_masked():
    rows = [("2015-03-02T02:00:00", 40.0, -73.0)]
    f = compute_mobility_modalities(rows, [DAY, DAY + dt.timedelta(days=1)])
    assert f.loc[DAY + dt.timedelta(days=1)].isna().all()


def test_no_night_fixes_warns(caplog):
    rows = [(f"2015-03-02T{h:02d}:00:00", 40.0, -73.0) for h in (10, 12, 14)]
    with caplog.at_level(logging.WARNING):
        compute_mobility_modalities(rows)
    assert "night" in caplog.text.lower()


def test_registry_entry_missing_kind():
    with pytest.raises(RegistryError):
        ModalityRegistry.from_mapping({"modalities": [{"name": "a"}]})
