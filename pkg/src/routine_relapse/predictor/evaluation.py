"""Personalized BRF training and leave-one-patient-out evaluation."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ..parallel import parallel_map
from .features import SampleTable
from .forest import N_TREES, fit_brf
from .quantize import BIN_GRID, fit_quantizer, quantize

log = logging.getLogger(__name__)

SUBSET_GRID = (50, 75, 100, 125, 150, 200, 300)
N_FEATURES_GRID = (3, 5, 10, 15)
INNER_FOLDS = 10


class LeakageError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def f2_score(precision: float, recall: float) -> float:
    denom = 4 * precision + recall
    return 5 * precision * recall / denom if denom > 0 else 0.0


def metrics(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(precision, recall, F2); zero denominators give 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f2_score(precision, recall)


def _f2(y, pred) -> float:
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return metrics(tp, fp, fn)[2]


def random_baseline(labels, trials: int = 1000, seed=0) -> tuple[float, float]:
    """Mean and std of F2 when each sample is called positive with probability 0.5."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("labels must be nonempty")
    rng = np.random.default_rng(seed)
    pred = rng.random((trials, y.size)) < 0.5
    tp = (pred & (y == 1)).sum(axis=1)
    fp = (pred & (y == 0)).sum(axis=1)
    fn = (~pred & (y == 1)).sum(axis=1)
    scores = np.array([metrics(int(a), int(b), int(c))[2] for a, b, c in zip(tp, fp, fn)])
    return float(scores.mean()), float(scores.std())


# ---------------------------------------------------------------------------
# personalization and feature selection
# ---------------------------------------------------------------------------

def personalization_subset(patient_ids, ages, labels, test_age: float, subset_size: int) -> np.ndarray:
    """Row indices from the patients closest in age (ties by id) until at least
    ``subset_size`` rows, plus every positive row."""
    if subset_size < 1:
        raise ValueError("subset_size must be >= 1")
    pids = np.asarray(patient_ids)
    ages = np.asarray(ages, dtype=np.float64)
    labels = np.asarray(labels)
    per_patient = {}
    for pid, age in zip(pids, ages):
        per_patient.setdefault(pid, age)
    order = sorted(per_patient, key=lambda p: (abs(per_patient[p] - test_age), p))
    take, count = [], 0
    for pid in order:
        if count >= subset_size:
            break
        take.append(pid)
        count += int(np.sum(pids == pid))
    keep = np.isin(pids, take) | (labels == 1)
    return np.flatnonzero(keep)


def feature_correlations(X, y) -> np.ndarray:
    """|Pearson r| of each column with the label; constant columns give 0."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt((xc ** 2).sum(axis=0))
    sy = np.sqrt((yc ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc * yc[:, None]).sum(axis=0) / (sx * sy)
    r = np.where((sx > 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0, initial=0.0))) & (sy > 0), r, 0.0)
    return np.abs(np.nan_to_num(r))


def select_features(X, y, n_features: int) -> np.ndarray:
    """Column indices of the ``n_features`` largest |r| (stable: lower index on ties)."""
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise ValueError("feature selection needs both classes in the subset")
    r = feature_correlations(X, y)
    order = np.argsort(-r, kind="stable")
    return np.sort(order[:n_features])


# ---------------------------------------------------------------------------
# one fit
# ---------------------------------------------------------------------------

@dataclass
class FitAudit:
    bootstrap_balanced: bool = True
    onehot_ok: bool = True


def _fit_predict(X, y, train, test, subset, n_features, n_bins, seed, n_trees, audit: FitAudit | None):
    feats = select_features(X[subset], y[subset], n_features)
    spec = fit_quantizer(X[np.ix_(train, feats)], n_bins)
    if spec.width == 0:
        return feats, np.zeros(len(test))
    Xtr = quantize(spec, X[np.ix_(train, feats)])
    Xte = quantize(spec, X[np.ix_(test, feats)])
    model = fit_brf(Xtr, y[train], n_trees=n_trees, seed=seed)
    if audit is not None:
        counts = model.bootstrap_class_counts(y[train])
        audit.bootstrap_balanced &= bool(np.all(counts[:, 0] == counts[:, 1]))
        blocks = np.concatenate([Xtr, Xte]).reshape(-1, len(spec.names), spec.n_bins).sum(axis=2)
        audit.onehot_ok &= bool(np.all(blocks == 1))
    return feats, model.predict_proba(Xte)


# ---------------------------------------------------------------------------
# tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grids:
    n_bins: tuple = BIN_GRID
    subset_size: tuple = SUBSET_GRID
    n_features: tuple = N_FEATURES_GRID
    inner_folds: int = INNER_FOLDS


def _kfold(n: int, k: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(perm, min(k, n))]


def tune_hyperparameters(X, y, patient_ids, ages, test_age: float | None, grids: Grids = Grids(),
                         seed=0, personalization: bool = True, n_trees: int = N_TREES):
    """Random k-fold search over the grids; returns ((n_bins, subset_size, n_features), scores).

    Ties on mean F2 go to fewer features, then fewer bins, then a smaller
    subset.  Inner folds whose validation or training part holds a single
    class are skipped.  Without personalization the subset grid collapses to
    ``None`` (the whole inner training set).
    """
    y = np.asarray(y)
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    folds = _kfold(len(y), grids.inner_folds, rng)
    fold_seeds = ss.spawn(len(folds))
    subsets = grids.subset_size if personalization else (None,)
    points = [(b, s, f) for f in grids.n_features for b in grids.n_bins for s in subsets]
    totals = {p: [] for p in points}
    for fi, val in enumerate(folds):
        train = np.setdiff1d(np.arange(len(y)), val)
        if np.unique(y[val]).size < 2 or np.unique(y[train]).size < 2:
            continue
        fseed = int(fold_seeds[fi].generate_state(1)[0])
        memo = {}
        rank_cache = {}  # subset size -> columns by decreasing |r|
        quant_cache = {}  # n_bins -> (train one-hot, val one-hot, block start per column or -1)
        for b, s, f in points:
            if s not in rank_cache:
                if s is None:
                    sub = train
                else:
                    sub = train[personalization_subset(patient_ids[train], ages[train], y[train], test_age, s)]
                    if np.unique(y[sub]).size < 2:
                        sub = train
                rank_cache[s] = np.argsort(-feature_correlations(X[sub], y[sub]), kind="stable")
            feats = tuple(np.sort(rank_cache[s][:f]).tolist())
            key = (feats, b)
            if key not in memo:
                if b not in quant_cache:
                    # per-column edges, so one fit over all columns serves every feature subset
                    spec = fit_quantizer(X[train], b)
                    start = np.full(X.shape[1], -1)
                    start[spec.source_columns] = np.arange(len(spec.source_columns)) * b
                    quant_cache[b] = (quantize(spec, X[train]), quantize(spec, X[val]), start)
                qtr, qval, start = quant_cache[b]
                cols = [start[c] + j for c in feats if start[c] >= 0 for j in range(b)]
                if not cols:
                    memo[key] = 0.0
                else:
                    model = fit_brf(qtr[:, cols], y[train], n_trees=n_trees, seed=fseed)
                    memo[key] = _f2(y[val], model.predict(qval[:, cols]))
            totals[(b, s, f)].append(memo[key])
    scores = {p: (float(np.mean(v)) if v else 0.0) for p, v in totals.items()}
    best = min(points, key=lambda p: (-round(scores[p], 12), p[2], p[0], -1 if p[1] is None else p[1]))
    return best, scores


# ---------------------------------------------------------------------------
# leave-one-patient-out
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f2: float
    feature_set: str
    personalization: bool
    per_patient: pd.DataFrame
    selection_frequency: dict
    folds: list = field(default_factory=list)
    predictions: pd.DataFrame | None = None

    def to_dict(self) -> dict:
        return {
            "feature_set": self.feature_set,
            "personalization": self.personalization,
            "confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
            "precision": self.precision, "recall": self.recall, "f2": self.f2,
            "selection_frequency": self.selection_frequency,
            "folds": self.folds,
        }


def fold_seed(master_seed: int, patient_id: str) -> int:
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(patient_id.encode())])
    return int(ss.generate_state(1)[0])


def _outer_fold(args):
    X, y, pids, ages, pid, grids, master_seed, personalization, n_trees = args
    test = np.flatnonzero(pids == pid)
    train = np.flatnonzero(pids != pid)
    seed = fold_seed(master_seed, pid)
    test_age = float(ages[test[0]])
    if np.unique(y[train]).size < 2:
        raise ValueError(f"training set for held-out {pid} has a single class")
    (b, s, f), scores = tune_hyperparameters(X[train], y[train], pids[train], ages[train], test_age,
                                             grids, seed, personalization, n_trees)
    if personalization:
        subset = train[personalization_subset(pids[train], ages[train], y[train], test_age, s)]
    else:
        subset = train
    # leakage guard: nothing from the held-out patient reaches any fitted piece
    if np.any(pids[train] == pid) or np.any(pids[subset] == pid):
        raise LeakageError(f"held-out patient {pid} leaked into training data")
    audit = FitAudit()
    feats, prob = _fit_predict(X, y, train, test, subset, f, b, seed, n_trees, audit)
    return {
        "patient_id": pid, "n_bins": int(b), "subset_size": s, "n_features": int(f),
        "selected": [int(i) for i in feats], "inner_f2": scores[(b, s, f)],
        "test_rows": test.tolist(), "probability": prob.tolist(),
        "leaked_train": int(np.sum(pids[train] == pid)),
        "leaked_subset": int(np.sum(pids[subset] == pid)),
        "leaked_quantizer": int(np.sum(pids[train] == pid)),
        "bootstrap_balanced": audit.bootstrap_balanced, "onehot_ok": audit.onehot_ok,
    }


def lopo_evaluate(table: SampleTable, feature_set: str = "all", personalization: bool = True,
                  grids: Grids = Grids(), seed: int = 0, threads: int = 1,
                  n_trees: int = N_TREES) -> EvaluationReport:
    """Hold out each patient in turn: tune, personalize, select, quantize, fit, predict."""
    t = table.select(feature_set) if feature_set else table
    X, y = t.X, t.y
    pids = t.meta["patient_id"].to_numpy()
    ages = t.meta["age"].to_numpy(dtype=np.float64)
    patients = sorted(set(pids))
    if len(patients) < 3 or not np.any(y == 1):
        raise ValueError("need at least 3 patients and one positive sample")
    folds = parallel_map(_outer_fold, [(X, y, pids, ages, p, grids, seed, personalization, n_trees)
                                       for p in patients], threads)
    prob = np.zeros(len(y))
    for fold in folds:
        prob[fold["test_rows"]] = fold["probability"]
    pred = (prob >= 0.5).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    precision, recall, f2 = metrics(tp, fp, fn)
    counts = np.zeros(len(t.names))
    for fold in folds:
        counts[fold["selected"]] += 1
    freq = {t.names[i]: counts[i] / len(folds) for i in np.argsort(-counts, kind="stable") if counts[i] > 0}
    per_patient = (pd.DataFrame({"patient_id": pids, "label": y, "prediction": pred})
                   .groupby("patient_id", sort=True)
                   .apply(lambda g: pd.Series({
                       "n_samples": len(g), "n_positive": int(g["label"].sum()),
                       "tp": int(((g["prediction"] == 1) & (g["label"] == 1)).sum()),
                       "fp": int(((g["prediction"] == 1) & (g["label"] == 0)).sum()),
                       "fn": int(((g["prediction"] == 0) & (g["label"] == 1)).sum()),
                       "tn": int(((g["prediction"] == 0) & (g["label"] == 0)).sum())}),
                          include_groups=False)
                   .reset_index())
    predictions = pd.DataFrame({
        "patient_id": pids, "window_end": t.meta["window_end"].to_numpy(),
        "end_day": t.meta["end_day"].to_numpy(), "probability": prob, "label": y, "prediction": pred})
    fold_records = [{k: v for k, v in f.items() if k not in ("test_rows", "probability")} for f in folds]
    for rec in fold_records:
        rec["selected"] = [t.names[i] for i in rec["selected"]]
    return EvaluationReport(tp, fp, fn, tn, precision, recall, f2, feature_set, personalization,
                            per_patient, freq, fold_records, predictions)
