"""Partitioning Around Medoids on a cached DTW matrix.

The objective is the sum of squared DTW distances from each day to its
medoid.  Assignments and day scores report unsquared DTW.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dtw import cross_dtw, dtw_distance, pairwise_dtw_matrix
from .templates import DailyTemplate

log = logging.getLogger(__name__)

SWAP_EPS = 1e-12


class PamError(ValueError):
    pass


# ---------------------------------------------------------------------------
# numba kernels; ``D`` holds unsquared distances and is squared on the fly
# ---------------------------------------------------------------------------

@njit(cache=True)
def _build(D, k, first):
    """Greedy BUILD order.  ``first < 0`` picks the classic 1-medoid optimum."""
    n = D.shape[0]
    nearest = np.full(n, np.inf)
    chosen = np.zeros(n, dtype=np.bool_)
    order = np.empty(k, dtype=np.int64)
    start = 0
    if first >= 0:
        order[0] = first
        chosen[first] = True
        for j in range(n):
            nearest[j] = D[first, j] * D[first, j]
        start = 1
    for step in range(start, k):
        best, best_gain = -1, -np.inf
        for c in range(n):
            if chosen[c]:
                continue
            gain = 0.0
            for j in range(n):
                d = D[c, j] * D[c, j]
                if step == 0:
                    gain -= d
                elif d < nearest[j]:
                    gain += nearest[j] - d
            if gain > best_gain:
                best, best_gain = c, gain
        order[step] = best
        chosen[best] = True
        for j in range(n):
            d = D[best, j] * D[best, j]
            if d < nearest[j]:
                nearest[j] = d
    return order


@njit(cache=True)
def _assign(D, medoids, near_idx, near_d, sec_d):
    n = D.shape[0]
    k = medoids.shape[0]
    total = 0.0
    for j in range(n):
        b1, b2, i1 = np.inf, np.inf, 0
        for m in range(k):
            d = D[medoids[m], j] * D[medoids[m], j]
            if d < b1:
                b2 = b1
                b1, i1 = d, m
            elif d < b2:
                b2 = d
        near_idx[j] = i1
        near_d[j] = b1
        sec_d[j] = b2
        total += b1
    return total


@njit(cache=True)
def _swap(D, medoids, max_sweeps):
    """Eager swap: apply the best medoid exchange for each candidate as soon
    as it strictly lowers the cost; stop after a full sweep without gain."""
    n = D.shape[0]
    k = medoids.shape[0]
    near_idx = np.empty(n, dtype=np.int64)
    near_d = np.empty(n)
    sec_d = np.empty(n)
    is_med = np.zeros(n, dtype=np.bool_)
    for m in range(k):
        is_med[medoids[m]] = True
    cost = _assign(D, medoids, near_idx, near_d, sec_d)
    trace = [cost]
    if k == n:
        return cost, trace
    loss = np.zeros(k)
    delta = np.empty(k)
    for j in range(n):
        loss[near_idx[j]] += sec_d[j] - near_d[j]
    last_change = 0
    x = 0
    sweeps = 0
    steps = 0
    while True:
        if not is_med[x]:
            acc = 0.0
            for m in range(k):
                delta[m] = loss[m]
            for j in range(n):
                d = D[x, j] * D[x, j]
                if d < near_d[j]:
                    acc += d - near_d[j]
                    delta[near_idx[j]] += near_d[j] - sec_d[j]
                elif d < sec_d[j]:
                    delta[near_idx[j]] += d - sec_d[j]
            best_m = 0
            for m in range(1, k):
                if delta[m] < delta[best_m]:
                    best_m = m
            change = acc + delta[best_m]
            if change < -SWAP_EPS * max(1.0, cost):
                is_med[medoids[best_m]] = False
                is_med[x] = True
                medoids[best_m] = x
                new_cost = _assign(D, medoids, near_idx, near_d, sec_d)
                if new_cost >= cost:
                    # guard against round-off; treat as converged
                    break
                cost = new_cost
                trace.append(cost)
                for m in range(k):
                    loss[m] = 0.0
                for j in range(n):
                    loss[near_idx[j]] += sec_d[j] - near_d[j]
                last_change = x
        steps += 1
        x += 1
        if x == n:
            x = 0
            sweeps += 1
            if sweeps >= max_sweeps:
                break
        if x == last_change and steps >= n:
            break
    return cost, trace


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PamModel:
    k: int
    medoid_indices: np.ndarray
    medoids: tuple  # DailyTemplate copies, or raw arrays when fit on arrays
    cluster_sizes: np.ndarray
    total_squared_cost: float
    labels: np.ndarray  # 1-based training assignments
    cost_trace: tuple = ()
    seed: int | None = None

    @property
    def n(self) -> int:
        return int(self.cluster_sizes.sum())

    @property
    def medoid_values(self) -> list[np.ndarray]:
        return [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in self.medoids]

    def to_dict(self) -> dict:
        meds = []
        for m in self.medoids:
            if isinstance(m, DailyTemplate):
                meds.append({"patient_id": m.patient_id, "date": m.date.isoformat(),
                             "values": m.values.tolist(), "missing_mask": m.missing_mask.tolist()})
            else:
                meds.append({"values": np.asarray(m).tolist()})
        return {
            "k": self.k,
            "medoid_indices": self.medoid_indices.tolist(),
            "medoids": meds,
            "cluster_sizes": self.cluster_sizes.tolist(),
            "total_squared_cost": self.total_squared_cost,
            "labels": self.labels.tolist(),
            "cost_trace": list(self.cost_trace),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PamModel":
        import datetime as dt
        meds = []
        for m in d["medoids"]:
            if "patient_id" in m:
                meds.append(DailyTemplate(m["patient_id"], dt.date.fromisoformat(m["date"]),
                                          np.asarray(m["values"]), np.asarray(m["missing_mask"], bool)))
            else:
                meds.append(np.asarray(m["values"], dtype=np.float64))
        return cls(int(d["k"]), np.asarray(d["medoid_indices"], dtype=np.int64), tuple(meds),
                   np.asarray(d["cluster_sizes"], dtype=np.int64), float(d["total_squared_cost"]),
                   np.asarray(d["labels"], dtype=np.int64), tuple(d["cost_trace"]), d.get("seed"))


def _values(templates) -> list:
    return [np.asarray(getattr(t, "values", t), dtype=np.float64) for t in templates]


def _finish(templates, D, medoids, cost, trace, seed) -> PamModel:
    meds = np.sort(np.asarray(medoids, dtype=np.int64))
    n = D.shape[0]
    near_idx = np.empty(n, dtype=np.int64)
    cost = _assign(D, meds, near_idx, np.empty(n), np.empty(n))
    sizes = np.bincount(near_idx, minlength=len(meds))
    copies = tuple(templates[i] for i in meds)
    return PamModel(len(meds), meds, copies, sizes, float(cost), near_idx + 1, tuple(trace), seed)


def _first_medoid(n: int, seed) -> int:
    if seed is None:
        return -1
    return int(np.random.default_rng(seed).integers(n))


def fit_pam(templates, k: int, seed=None, distances: np.ndarray | None = None,
            max_sweeps: int = 100, threads: int = 1) -> PamModel:
    """BUILD then eager SWAP.

    ``seed=None`` runs the deterministic classic BUILD; an integer seed picks
    the first medoid at random and continues greedily.  Pass a precomputed
    DTW matrix as ``distances`` to skip the pairwise computation.
    """
    templates = list(templates)
    n = len(templates)
    if not 1 <= k <= n:
        raise PamError(f"k={k} must lie in 1..n={n}")
    D = np.ascontiguousarray(distances if distances is not None
                             else pairwise_dtw_matrix(_values(templates), threads=threads), dtype=np.float64)
    order = _build(D, k, _first_medoid(n, seed))
    medoids = order.copy()
    cost, trace = _swap(D, medoids, max_sweeps)
    return _finish(templates, D, medoids, cost, list(trace), seed)


@dataclass
class PamSelectionReport:
    k_values: list
    costs: list  # per k, one total squared cost per init
    mean_costs: list
    best_costs: list
    elbow_k: int
    inits: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"k_values": self.k_values, "costs": self.costs, "mean_costs": self.mean_costs,
                "best_costs": self.best_costs, "elbow_k": self.elbow_k, "inits": self.inits}

    @classmethod
    def from_dict(cls, d: dict) -> "PamSelectionReport":
        return cls(**d)


def elbow(k_values, costs) -> int:
    """k maximizing the discrete second difference of the cost curve; smaller k on ties."""
    k_values = list(k_values)
    costs = np.asarray(costs, dtype=np.float64)
    if len(k_values) < 3:
        log.warning("elbow needs at least three k values; returning the min-cost k")
        return int(k_values[int(np.argmin(costs))])
    second = costs[:-2] - 2 * costs[1:-1] + costs[2:]
    return int(k_values[1 + int(np.argmax(second))])


def _init_seeds(seed: int, inits: int) -> list:
    if inits < 1:
        raise PamError("need at least one init")
    children = np.random.SeedSequence(seed).generate_state(inits - 1)
    return [None] + [int(s) for s in children]


def select_pam(templates, k_range=range(5, 21), inits: int = 5, seed: int = 0,
               distances: np.ndarray | None = None, max_sweeps: int = 100, threads: int = 1):
    """Fit every k with ``inits`` initializations and pick the elbow of the mean cost curve.

    The first init is the classic BUILD; the rest start from a seeded random
    medoid.  Returns the best-of-inits model at the elbow k and the report.
    """
    templates = list(templates)
    n = len(templates)
    k_values = [int(k) for k in k_range]
    if not k_values or max(k_values) > n:
        raise PamError(f"k_range must be nonempty with max <= n={n}")
    D = np.ascontiguousarray(distances if distances is not None
                             else pairwise_dtw_matrix(_values(templates), threads=threads), dtype=np.float64)
    seeds = _init_seeds(seed, inits)
    kmax = max(k_values)
    orders = [_build(D, kmax, _first_medoid(n, s)) for s in seeds]
    costs, fits = [], {}
    for k in k_values:
        row = []
        for s, order in zip(seeds, orders):
            medoids = order[:k].copy()
            cost, trace = _swap(D, medoids, max_sweeps)
            row.append(float(cost))
            prev = fits.get(k)
            if prev is None or cost < prev[0]:
                fits[k] = (cost, medoids.copy(), list(trace), s)
        costs.append(row)
    mean_costs = [float(np.mean(r)) for r in costs]
    best_costs = [float(np.min(r)) for r in costs]
    k_star = elbow(k_values, mean_costs)
    _, medoids, trace, s = fits[k_star]
    model = _finish(templates, D, medoids, None, trace, s)
    report = PamSelectionReport(k_values, costs, mean_costs, best_costs, k_star,
                                [s if s is None else int(s) for s in seeds])
    return model, report


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PamDayScores:
    label: int
    assigned_distance: float
    weighted_distance: float
    dtw_prev_day: float | None = None


def score_day_pam(model: PamModel, t, prev=None) -> PamDayScores:
    values = np.asarray(getattr(t, "values", t), dtype=np.float64)
    dist = np.array([dtw_distance(values, m) for m in model.medoid_values])
    label = int(np.argmin(dist))
    frac = model.cluster_sizes / model.cluster_sizes.sum()
    prev_d = None if prev is None else dtw_distance(values, getattr(prev, "values", prev))
    return PamDayScores(label + 1, float(dist[label]), float(max(dist @ frac, dist[label])), prev_d)


def pam_scores(model: PamModel, templates, dates=None) -> dict[str, np.ndarray]:
    """Vectorized day scores over one patient's (or any) ordered template list.

    ``dtw_prev_day`` is the distance to the template of the previous calendar
    day and NaN when that day is absent; pass ``dates`` to enable it.
    """
    values = _values(templates)
    n = len(values)
    if n == 0:
        empty = np.zeros(0)
        return {"label": empty.astype(np.int64), "assigned_distance": empty,
                "weighted_distance": empty, "dtw_prev_day": empty}
    dist = cross_dtw(values, model.medoid_values)
    label = np.argmin(dist, axis=1)
    assigned = dist[np.arange(n), label]
    frac = model.cluster_sizes / model.cluster_sizes.sum()
    weighted = np.maximum(dist @ frac, assigned)
    prev = np.full(n, np.nan)
    if dates is not None:
        for i in range(1, n):
            if (dates[i] - dates[i - 1]).days == 1:
                prev[i] = dtw_distance(values[i], values[i - 1])
    return {"label": label + 1, "assigned_distance": assigned, "weighted_distance": weighted,
            "dtw_prev_day": prev}
