"""Window features: baseline (templates, EMA, screen, mobility, demographics)
and clustering scores from the GMM and PAM models."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from ..registry import ModalityRegistry, default_registry
from ..templates import MOBILITY_SERIES, N_EMA_ITEMS
from .windows import FEATURE_DAYS, WindowSample

log = logging.getLogger(__name__)

TEMPLATE_MODALITIES = ("acceleration", "ambient_light", "distance_traveled", "call_duration",
                       "ambient_sound", "conversation_duration")
SCREEN_MODALITY = "unlock_duration"
TEMPLATE_STATS = ("mean", "std", "max", "range", "skewness", "kurtosis", "std_template_mean",
                  "max_dev_from_max", "rhythm_halves", "rhythm_halves_weighted", "rhythm_max_vs_mean",
                  "daily_mean", "daily_std")

GMM_SCORES = ("assigned_likelihood", "weighted_likelihood")
PAM_SCORES = ("assigned_distance", "weighted_distance", "dtw_prev_day")
FEATURE_SETS = ("all", "baseline", "clustering", "gmm", "pam", "gmm+baseline", "pam+baseline")


def baseline_feature_names() -> list[str]:
    names = [f"{m}_{s}" for m in TEMPLATE_MODALITIES for s in TEMPLATE_STATS]
    names += [f"ema{i + 1}_{s}" for i in range(N_EMA_ITEMS) for s in ("mean", "std")]
    names += [f"{m}_daily_{s}" for m in (SCREEN_MODALITY,) + MOBILITY_SERIES for s in ("mean", "std")]
    names += ["age", "education_years"]
    return names


def clustering_feature_names(model: str) -> list[str]:
    scores = GMM_SCORES if model == "gmm" else PAM_SCORES
    names = [f"mean_{model}_label", f"std_{model}_label"]
    for s in scores:
        names += [f"mean_{model}_{s}", f"std_{model}_{s}"]
    return names + [f"{model}_transitions", f"{model}_states"]


def feature_group(name: str) -> str:
    if "_gmm_" in name or name.startswith("gmm_"):
        return "gmm"
    if "_pam_" in name or name.startswith("pam_"):
        return "pam"
    return "baseline"


def groups_for(feature_set: str) -> set[str]:
    table = {"all": {"baseline", "gmm", "pam"}, "baseline": {"baseline"}, "clustering": {"gmm", "pam"},
             "gmm": {"gmm"}, "pam": {"pam"}, "gmm+baseline": {"gmm", "baseline"},
             "pam+baseline": {"pam", "baseline"}}
    try:
        return table[feature_set]
    except KeyError:
        raise ValueError(f"unknown feature set {feature_set!r}; expected one of {FEATURE_SETS}") from None


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _shape_stats(v: np.ndarray) -> tuple[float, float]:
    if v.size < 2 or np.ptp(v) == 0:
        return 0.0, 0.0
    return float(stats.skew(v)), float(stats.kurtosis(v))


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def _hourly(values: np.ndarray, observed: np.ndarray):
    """Hourly mean, population std and max over days; unobserved hours give 0."""
    counts = observed.sum(axis=0)
    x = np.where(observed, values, 0.0)
    mean = np.divide(x.sum(axis=0), counts, out=np.zeros(values.shape[1]), where=counts > 0)
    var = np.divide((np.where(observed, values - mean, 0.0) ** 2).sum(axis=0), counts,
                    out=np.zeros(values.shape[1]), where=counts > 0)
    mx = np.where(observed, values, -np.inf).max(axis=0, initial=-np.inf)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return mean, np.sqrt(var), mx


def _daily_averages(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    counts = observed.sum(axis=1)
    sums = np.where(observed, values, 0.0).sum(axis=1)
    return sums[counts > 0] / counts[counts > 0]


def _mean_std(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return np.nan, np.nan
    return float(v.mean()), float(v.std())


def template_features(values: np.ndarray, observed: np.ndarray, day_pos: np.ndarray,
                      half: int = FEATURE_DAYS // 2) -> dict[str, float]:
    """The 13 statistics for one modality from ``(days, 24)`` window data.

    ``day_pos`` gives each row's 0-based position inside the window so the
    two 14-day halves can be split even when days are missing.
    """
    keep = observed.any(axis=1)
    values, observed, day_pos = values[keep], observed[keep], day_pos[keep]
    if values.shape[0] == 0:
        return {}
    M, S, X = _hourly(values, observed)
    skew, kurt = _shape_stats(M)
    first, second = day_pos < half, day_pos >= half
    if first.any() and second.any():
        m1 = _minmax(_hourly(values[first], observed[first])[0])
        m2 = _minmax(_hourly(values[second], observed[second])[0])
        diff = m1 - m2
        rhythm = float(np.linalg.norm(diff))
        rhythm_w = float(np.sqrt(np.sum(diff ** 2 / (1.0 + S))))
    else:
        rhythm = rhythm_w = 0.0
    daily = _daily_averages(values, observed)
    return {
        "mean": float(M.mean()), "std": float(M.std()), "max": float(M.max()),
        "range": float(np.ptp(M)), "skewness": skew, "kurtosis": kurt,
        "std_template_mean": float(S.mean()),
        "max_dev_from_max": float(np.max(np.abs(M - X))),
        "rhythm_halves": rhythm, "rhythm_halves_weighted": rhythm_w,
        "rhythm_max_vs_mean": float(np.linalg.norm(_minmax(X) - _minmax(M))),
        "daily_mean": float(daily.mean()), "daily_std": float(daily.std()),
    }


@dataclass
class PatientWindowData:
    """Per-patient arrays indexed by day number (1-based from the first date)."""

    patient_id: str
    start: dt.date
    day: np.ndarray  # (d,) int day numbers with templates
    values: np.ndarray  # (d, M, 24)
    observed: np.ndarray  # (d, M, 24) bool
    ema: dict  # day number -> (10,) items
    mobility: dict  # day number -> (4,) values
    age: float | None
    education_years: float | None

    @classmethod
    def from_record(cls, record) -> "PatientWindowData":
        start = record.templates[0].date
        day = np.array([(t.date - start).days + 1 for t in record.templates], dtype=np.int64)
        values, mask = record.stack()
        num = lambda d: (d - start).days + 1  # noqa: E731
        return cls(record.patient_id, start, day, values, ~mask,
                   {num(d): v for d, v in record.ema.items()},
                   {num(d): v for d, v in record.mobility.items()},
                   record.age, record.education_years)


def extract_baseline_features(data: PatientWindowData, end_day: int,
                              registry: ModalityRegistry | None = None) -> tuple[dict, set]:
    """Baseline features for the window ending at ``end_day``; returns (features, flags).

    Modalities with no observed day in the window are imputed 0 and flagged.
    """
    registry = registry or default_registry()
    lo = end_day - FEATURE_DAYS + 1
    sel = (data.day >= lo) & (data.day <= end_day)
    pos = data.day[sel] - lo
    feats, flags = {}, set()
    for m in TEMPLATE_MODALITIES:
        mi = registry.index(m)
        f = template_features(data.values[sel, mi], data.observed[sel, mi], pos)
        if not f:
            flags.add(f"missing:{m}")
            f = dict.fromkeys(TEMPLATE_STATS, 0.0)
        feats.update({f"{m}_{k}": f[k] for k in TEMPLATE_STATS})
    window = range(lo, end_day + 1)
    ema = np.array([data.ema[d] for d in window if d in data.ema]).reshape(-1, N_EMA_ITEMS)
    if ema.shape[0] == 0:
        flags.add("missing:ema")
    for i in range(N_EMA_ITEMS):
        mean, std = _mean_std(ema[:, i])
        feats[f"ema{i + 1}_mean"], feats[f"ema{i + 1}_std"] = mean, std
    si = registry.index(SCREEN_MODALITY)
    screen = _daily_averages(data.values[sel, si], data.observed[sel, si])
    feats[f"{SCREEN_MODALITY}_daily_mean"], feats[f"{SCREEN_MODALITY}_daily_std"] = _mean_std(screen)
    mob = np.array([data.mobility[d] for d in window if d in data.mobility]).reshape(-1, len(MOBILITY_SERIES))
    for j, name in enumerate(MOBILITY_SERIES):
        feats[f"{name}_daily_mean"], feats[f"{name}_daily_std"] = _mean_std(mob[:, j])
    feats["age"] = np.nan if data.age is None else float(data.age)
    feats["education_years"] = np.nan if data.education_years is None else float(data.education_years)
    for k, v in feats.items():
        if np.isnan(v):
            flags.add(f"missing:{k}")
            feats[k] = 0.0
    return feats, flags


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def transitions_and_states(labels: Sequence, days: Sequence[int] | None = None) -> tuple[int, int]:
    """Label changes between consecutive days, and the number of distinct labels."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0, 0
    change = labels[1:] != labels[:-1]
    if days is not None:
        days = np.asarray(days)
        change &= np.diff(days) == 1
    return int(change.sum()), int(np.unique(labels).size)


def extract_clustering_features(model: str, labels, scores: Mapping[str, Sequence], days=None) -> dict:
    """Features for one model from its per-day window scores; empty when no day was scored."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        return {}
    out = {}
    out[f"mean_{model}_label"], out[f"std_{model}_label"] = float(labels.mean()), float(labels.std())
    for name in (GMM_SCORES if model == "gmm" else PAM_SCORES):
        mean, std = _mean_std(scores[name])
        out[f"mean_{model}_{name}"] = 0.0 if np.isnan(mean) else mean
        out[f"std_{model}_{name}"] = 0.0 if np.isnan(std) else std
    out[f"{model}_transitions"], out[f"{model}_states"] = transitions_and_states(labels, days)
    return out


# ---------------------------------------------------------------------------
# sample table
# ---------------------------------------------------------------------------

@dataclass
class SampleTable:
    meta: pd.DataFrame  # patient_id, end_day, window_end, label, age, flagged
    X: np.ndarray
    names: list

    @property
    def y(self) -> np.ndarray:
        return self.meta["label"].to_numpy(dtype=np.int64)

    @property
    def groups(self) -> list[str]:
        return [feature_group(n) for n in self.names]

    def select(self, feature_set: str) -> "SampleTable":
        keep = groups_for(feature_set)
        cols = [i for i, g in enumerate(self.groups) if g in keep]
        return SampleTable(self.meta, self.X[:, cols], [self.names[i] for i in cols])

    def with_features(self, X: np.ndarray, names: list) -> "SampleTable":
        return SampleTable(self.meta, np.asarray(X, dtype=np.float64), list(names))


def _score_lookup(frame: pd.DataFrame | None, start_by_patient: dict, columns):
    out = {}
    if frame is None:
        return out
    for pid, g in frame.groupby("patient_id", sort=False):
        start = start_by_patient.get(pid)
        if start is None:
            continue
        days = np.array([(d - start).days + 1 for d in g["date"]], dtype=np.int64)
        order = np.argsort(days)
        out[pid] = (days[order], g["label"].to_numpy()[order],
                    {c: g[c].to_numpy(dtype=np.float64)[order] for c in columns})
    return out


def build_sample_table(cohort, samples: list[WindowSample], gmm_scores: pd.DataFrame | None = None,
                       pam_scores: pd.DataFrame | None = None,
                       registry: ModalityRegistry | None = None) -> SampleTable:
    """Feature matrix for ``samples``.  Score frames carry patient_id, date, label and score columns."""
    registry = registry or default_registry()
    data = {p.patient_id: PatientWindowData.from_record(p) for p in cohort if p.templates}
    starts = {pid: d.start for pid, d in data.items()}
    lookups = {"gmm": _score_lookup(gmm_scores, starts, GMM_SCORES),
               "pam": _score_lookup(pam_scores, starts, PAM_SCORES)}
    models = [m for m, f in (("gmm", gmm_scores), ("pam", pam_scores)) if f is not None]
    names = baseline_feature_names() + [n for m in models for n in clustering_feature_names(m)]
    rows, meta = [], []
    for s in samples:
        feats, flags = extract_baseline_features(data[s.patient_id], s.end_day, registry)
        lo = s.end_day - FEATURE_DAYS + 1
        for m in models:
            entry = lookups[m].get(s.patient_id)
            f = {}
            if entry is not None:
                days, labels, scores = entry
                sel = (days >= lo) & (days <= s.end_day)
                f = extract_clustering_features(m, labels[sel], {k: v[sel] for k, v in scores.items()}, days[sel])
            if not f:
                flags.add(f"missing:{m}")
                f = dict.fromkeys(clustering_feature_names(m), 0.0)
            feats.update(f)
        s.features, s.flags = feats, flags
        rows.append([feats[n] for n in names])
        meta.append((s.patient_id, s.end_day, s.window_end, s.label, s.age, bool(flags)))
    meta = pd.DataFrame(meta, columns=["patient_id", "end_day", "window_end", "label", "age", "flagged"])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return SampleTable(meta, X, names)
