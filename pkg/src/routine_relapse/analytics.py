"""Cluster characterization and near-relapse effect sizes."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

NR_WINDOWS = (7, 14, 20, 30)
NEGLIGIBLE = 0.147


# ---------------------------------------------------------------------------
# clusters
# ---------------------------------------------------------------------------

def cluster_spread(assignments, points) -> dict[int, float]:
    """Trace of the (n-1) sample covariance of each cluster's members.

    Singletons give 0; labels with no members are simply absent.
    """
    labels = np.asarray(assignments)
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    X = X.reshape(len(X), -1)
    if len(labels) != len(X):
        raise ValueError("every point needs an assignment")
    out = {}
    for lab in np.unique(labels):
        members = X[labels == lab]
        if len(members) < 2:
            out[int(lab)] = 0.0
        else:
            out[int(lab)] = float(members.var(axis=0, ddof=1).sum())
    return out


def cluster_profiles(assignments, values, masks=None) -> dict[int, np.ndarray]:
    """Per-cluster mean template over unmasked entries; all-masked cells give 0."""
    labels = np.asarray(assignments)
    V = np.asarray(values, dtype=np.float64)
    M = np.zeros(V.shape, bool) if masks is None else np.asarray(masks, bool)
    out = {}
    for lab in np.unique(labels):
        sel = labels == lab
        observed = ~M[sel]
        counts = observed.sum(axis=0)
        sums = np.where(observed, V[sel], 0.0).sum(axis=0)
        out[int(lab)] = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return out


@dataclass
class ClusterSummary:
    table: pd.DataFrame  # label, size, covariance_trace, mean_assigned, mean_weighted
    profiles: dict = field(default_factory=dict)

    @property
    def order(self) -> list[int]:
        return [int(v) for v in self.table["label"]]


def summarize_clusters(labels, points, values, masks=None, assigned=None, weighted=None) -> ClusterSummary:
    """Sizes, spreads, mean scores and profiles, ordered by descending size (label breaks ties)."""
    labels = np.asarray(labels)
    spread = cluster_spread(labels, points)
    profiles = cluster_profiles(labels, values, masks)
    rows = []
    for lab in spread:
        sel = labels == lab
        rows.append({
            "label": lab,
            "size": int(sel.sum()),
            "covariance_trace": spread[lab],
            "mean_assigned": float(np.nanmean(np.asarray(assigned)[sel])) if assigned is not None else np.nan,
            "mean_weighted": float(np.nanmean(np.asarray(weighted)[sel])) if weighted is not None else np.nan,
        })
    table = pd.DataFrame(rows, columns=["label", "size", "covariance_trace", "mean_assigned", "mean_weighted"])
    table = table.sort_values(["size", "label"], ascending=[False, True], kind="stable").reset_index(drop=True)
    return ClusterSummary(table, {lab: profiles[lab] for lab in table["label"]})


# ---------------------------------------------------------------------------
# effect sizes
# ---------------------------------------------------------------------------

def cliffs_delta(g1, g2) -> float:
    """(#(a > b) - #(a < b)) / (n1 n2) over all cross pairs, with exact counts."""
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.sort(np.asarray(g2, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    less = np.searchsorted(b, a, side="left").sum()
    greater = (b.size - np.searchsorted(b, a, side="right")).sum()
    return float((int(less) - int(greater)) / (a.size * b.size))


def is_non_negligible(delta: float, threshold: float = NEGLIGIBLE) -> bool:
    return abs(delta) > threshold


@dataclass(frozen=True)
class NrPartition:
    patient_id: str
    relapse: dt.date
    x: int
    nr_days: tuple
    pre_nr_days: tuple
    truncated: bool


def partition_near_relapse(observed_days: Iterable[dt.date], relapses: Iterable[dt.date], x: int,
                           patient_id: str = "") -> list[NrPartition]:
    """NRx = observed days in [r-x, r-1]; pre-NRx = observed days after the
    previous relapse and before r-x.  NRx is flagged when shorter than x."""
    days = sorted(set(observed_days))
    out = []
    boundary = None
    for r in sorted(relapses):
        start = r - dt.timedelta(days=x)
        nr = tuple(d for d in days if start <= d < r)
        pre = tuple(d for d in days if d < start and (boundary is None or d > boundary))
        out.append(NrPartition(patient_id, r, x, nr, pre, len(nr) < x))
        boundary = r
    return out


@dataclass
class EffectReport:
    events: pd.DataFrame  # one row per (score, x, patient, relapse)
    summary: pd.DataFrame  # one row per (score, x)
    threshold: float = NEGLIGIBLE

    def mean_delta(self, score: str, x: int) -> float:
        row = self.summary[(self.summary["score"] == score) & (self.summary["x"] == x)]
        return float(row["mean_delta"].iloc[0])


def effect_report(day_scores: pd.DataFrame, relapses: Mapping[str, Sequence[dt.date]],
                  score_columns: Sequence[str], xs: Sequence[int] = NR_WINDOWS,
                  threshold: float = NEGLIGIBLE) -> EffectReport:
    """Cliff's delta between NRx and pre-NRx scores, per event and pooled.

    ``day_scores`` needs ``patient_id`` and ``date`` columns plus the score
    columns.  NaN scores are dropped; events with an empty side are skipped.
    """
    events, summary = [], []
    groups = {pid: g for pid, g in day_scores.groupby("patient_id", sort=True)}
    for score in score_columns:
        for x in xs:
            deltas, pooled_nr, pooled_pre, skipped = [], [], [], 0
            for pid in sorted(relapses):
                g = groups.get(pid)
                if g is None or not len(relapses[pid]):
                    continue
                by_day = dict(zip(g["date"], g[score]))
                for part in partition_near_relapse(g["date"], relapses[pid], x, pid):
                    nr = np.array([by_day[d] for d in part.nr_days], dtype=np.float64)
                    pre = np.array([by_day[d] for d in part.pre_nr_days], dtype=np.float64)
                    nr, pre = nr[~np.isnan(nr)], pre[~np.isnan(pre)]
                    if nr.size == 0 or pre.size == 0:
                        log.info("%s relapse %s: %s NR%d has an empty side; skipped", pid, part.relapse, score, x)
                        skipped += 1
                        continue
                    d = cliffs_delta(nr, pre)
                    deltas.append(d)
                    pooled_nr.append(nr)
                    pooled_pre.append(pre)
                    events.append({"score": score, "x": x, "patient_id": pid, "relapse": part.relapse,
                                   "n_nr": nr.size, "n_pre": pre.size, "truncated": part.truncated,
                                   "delta": d})
            mean = float(np.mean(deltas)) if deltas else np.nan
            pooled = (cliffs_delta(np.concatenate(pooled_nr), np.concatenate(pooled_pre))
                      if deltas else np.nan)
            summary.append({"score": score, "x": x, "n_events": len(deltas), "n_skipped": skipped,
                            "mean_delta": mean, "pooled_delta": pooled,
                            "non_negligible": bool(deltas) and is_non_negligible(mean, threshold),
                            "pooled_non_negligible": bool(deltas) and is_non_negligible(pooled, threshold)})
    ev = pd.DataFrame(events, columns=["score", "x", "patient_id", "relapse", "n_nr", "n_pre",
                                       "truncated", "delta"])
    return EffectReport(ev, pd.DataFrame(summary), threshold)


def nr_boxplot_data(day_scores: pd.DataFrame, relapses: Mapping[str, Sequence[dt.date]],
                    score_columns: Sequence[str], xs: Sequence[int] = NR_WINDOWS) -> pd.DataFrame:
    """Long table of (score, x, group, value) with group in {"NR", "pre-NR"}, pooled over events."""
    rows = []
    groups = {pid: g for pid, g in day_scores.groupby("patient_id", sort=True)}
    for score in score_columns:
        for x in xs:
            for pid in sorted(relapses):
                g = groups.get(pid)
                if g is None:
                    continue
                by_day = dict(zip(g["date"], g[score]))
                for part in partition_near_relapse(g["date"], relapses[pid], x, pid):
                    for name, days in (("NR", part.nr_days), ("pre-NR", part.pre_nr_days)):
                        for d in days:
                            v = by_day[d]
                            if not np.isnan(v):
                                rows.append((score, x, name, pid, float(v)))
    return pd.DataFrame(rows, columns=["score", "x", "group", "patient_id", "value"])
