"""Gaussian mixture routines: EM fitting, model selection and day scoring.

Day scores follow the chi-squared view of squared Mahalanobis distance: for
component ``j`` the survival value ``s_j = P(chi2_q > d2_j)`` says how ordinary
the day looks to that component.  The assigned score is ``s`` of the most
probable component; the weighted score mixes all ``s_j`` by component weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from .parallel import parallel_map

log = logging.getLogger(__name__)

COV_TYPES = ("full", "tied", "diag", "spherical")
REG_COVAR = 1e-6
_MIN_MASS = 1e-10
_LOG_2PI = np.log(2 * np.pi)


class GmmError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GmmModel:
    cov_type: str
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    final_log_likelihood: float = float("nan")
    n_iter: int = 0
    converged: bool = False
    log_likelihood_trace: tuple = ()
    reseed_iterations: tuple = ()

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def q(self) -> int:
        return self.means.shape[1]

    dof = q

    def full_covariances(self) -> np.ndarray:
        return _as_full(self.covariances, self.cov_type, self.k, self.q)

    def to_dict(self) -> dict:
        return {
            "k": self.k, "q": self.q, "cov_type": self.cov_type,
            "weights": self.weights.tolist(), "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "final_log_likelihood": self.final_log_likelihood,
            "n_iter": self.n_iter, "converged": self.converged,
            "log_likelihood_trace": list(self.log_likelihood_trace),
            "reseed_iterations": list(self.reseed_iterations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        return cls(d["cov_type"], np.asarray(d["weights"], float), np.asarray(d["means"], float),
                   np.asarray(d["covariances"], float), float(d["final_log_likelihood"]),
                   int(d["n_iter"]), bool(d["converged"]), tuple(d["log_likelihood_trace"]),
                   tuple(d["reseed_iterations"]))


def _as_full(cov, cov_type, k, q) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov_type == "full":
        return cov
    if cov_type == "tied":
        return np.broadcast_to(cov, (k, q, q)).copy()
    if cov_type == "diag":
        return np.stack([np.diag(c) for c in cov])
    if cov_type == "spherical":
        return np.stack([c * np.eye(q) for c in cov])
    raise GmmError(f"unknown cov_type {cov_type!r}")


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def _cholesky(mat: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError:
        return linalg.cholesky(mat + REG_COVAR * np.eye(mat.shape[0]), lower=True)


def mahalanobis_sq(data: np.ndarray, model: GmmModel) -> tuple[np.ndarray, np.ndarray]:
    """Squared Mahalanobis distance of every row to every component, plus log-dets."""
    return _mahalanobis_sq(np.atleast_2d(data), model.means, model.covariances, model.cov_type)


def _mahalanobis_sq(X, means, cov, cov_type):
    n, q = X.shape
    k = means.shape[0]
    d2 = np.empty((n, k))
    logdet = np.empty(k)
    if cov_type in ("full", "tied"):
        for j in range(k):
            L = _cholesky(cov[j] if cov_type == "full" else cov)
            z = linalg.solve_triangular(L, (X - means[j]).T, lower=True, check_finite=False)
            d2[:, j] = np.einsum("ij,ij->j", z, z)
            logdet[j] = 2.0 * np.log(np.diag(L)).sum()
    elif cov_type == "diag":
        prec = 1.0 / cov
        d2[:] = (X ** 2) @ prec.T - 2.0 * X @ (means * prec).T + np.sum(means ** 2 * prec, axis=1)
        logdet[:] = np.log(cov).sum(axis=1)
    elif cov_type == "spherical":
        prec = 1.0 / cov
        d2[:] = (np.sum(X ** 2, axis=1)[:, None] - 2.0 * X @ means.T + np.sum(means ** 2, axis=1)) * prec
        logdet[:] = q * np.log(cov)
    else:
        raise GmmError(f"unknown cov_type {cov_type!r}")
    np.maximum(d2, 0.0, out=d2)
    return d2, logdet


def _weighted_log_prob(X, weights, means, cov, cov_type):
    d2, logdet = _mahalanobis_sq(X, means, cov, cov_type)
    q = X.shape[1]
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - 0.5 * (q * _LOG_2PI + logdet + d2)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def init_centroids_farthest(data: np.ndarray, k: int, seed) -> np.ndarray:
    """First centroid uniformly at random, then repeatedly the point farthest
    from its nearest chosen centroid (lowest index on ties)."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k > n:
        raise GmmError(f"k={k} exceeds the number of points n={n}")
    if k < 1:
        raise GmmError("k must be at least 1")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    nearest = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, np.sum((data - data[nxt]) ** 2, axis=1))
    return data[chosen].copy()


def _m_step(X, resp, cov_type):
    n, q = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = resp.T @ X / nk[:, None]
    if cov_type == "full":
        cov = np.empty((len(nk), q, q))
        for j in range(len(nk)):
            diff = X - means[j]
            cov[j] = (resp[:, j] * diff.T) @ diff / nk[j]
            cov[j].flat[:: q + 1] += REG_COVAR
    elif cov_type == "tied":
        cov = (X.T @ X - (nk * means.T) @ means) / n
        cov = (cov + cov.T) / 2
        cov.flat[:: q + 1] += REG_COVAR
    elif cov_type == "diag":
        avg_x2 = resp.T @ (X * X) / nk[:, None]
        cov = np.maximum(avg_x2 - means ** 2, 0.0) + REG_COVAR
    elif cov_type == "spherical":
        avg_x2 = resp.T @ (X * X) / nk[:, None]
        cov = (np.maximum(avg_x2 - means ** 2, 0.0) + REG_COVAR).mean(axis=1)
    else:
        raise GmmError(f"unknown cov_type {cov_type!r}")
    return nk / nk.sum(), means, cov, nk


def _global_cov(X, cov_type):
    q = X.shape[1]
    full = np.atleast_2d(np.cov(X.T, bias=True)) + REG_COVAR * np.eye(q)
    if cov_type in ("full", "tied"):
        return full
    if cov_type == "diag":
        return np.diag(full).copy()
    return np.float64(np.diag(full).mean())


def fit_gmm_em(data: np.ndarray, k: int, cov_type: str = "full", init_means: np.ndarray | None = None,
               tol: float = 1e-6, max_iter: int = 200, seed=0) -> GmmModel:
    """EM for a ``k``-component mixture.

    Initial responsibilities are the hard nearest-mean assignment to
    ``init_means`` (farthest-point initialization when not given).  Stops when
    the relative change in total log-likelihood drops below ``tol``.  A
    component whose responsibility mass underflows is re-seeded at the point
    with the lowest mixture log-likelihood.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise GmmError("data must be a finite 2-D array")
    n, q = X.shape
    if cov_type not in COV_TYPES:
        raise GmmError(f"unknown cov_type {cov_type!r}")
    if k < 1 or n <= k:
        raise GmmError(f"need n > k (n={n}, k={k})")
    if init_means is None:
        init_means = init_centroids_farthest(X, k, seed)
    init_means = np.asarray(init_means, dtype=np.float64)
    d0 = (np.sum(X ** 2, 1)[:, None] - 2 * X @ init_means.T + np.sum(init_means ** 2, 1))
    resp = np.zeros((n, k))
    resp[np.arange(n), np.argmin(d0, axis=1)] = 1.0
    weights, means, cov, _ = _m_step(X, resp, cov_type)

    trace: list[float] = []
    reseeds: list[int] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        wlp = _weighted_log_prob(X, weights, means, cov, cov_type)
        point_ll = logsumexp(wlp, axis=1)
        ll = float(point_ll.sum())
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        resp = np.exp(wlp - point_ll[:, None])
        weights, means, cov, nk = _m_step(X, resp, cov_type)
        dead = np.flatnonzero(nk < _MIN_MASS * n + 10 * np.finfo(float).eps)
        if dead.size:
            worst = np.argsort(point_ll, kind="stable")
            for slot, j in enumerate(dead):
                log.info("EM iteration %d: component %d collapsed; re-seeded", it, j)
                means[j] = X[worst[slot]]
                if cov_type != "tied":
                    cov[j] = _global_cov(X, cov_type)
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            reseeds.append(it)
    else:
        it = max_iter
    if not converged:
        log.info("EM did not converge in %d iterations (k=%d, %s)", max_iter, k, cov_type)
    return GmmModel(cov_type, weights, means, cov, trace[-1], it, converged, tuple(trace), tuple(reseeds))


def n_parameters(k: int, q: int, cov_type: str) -> int:
    cov_params = {
        "full": k * q * (q + 1) // 2,
        "diag": k * q,
        "spherical": k,
        "tied": q * (q + 1) // 2,
    }[cov_type]
    return (k - 1) + k * q + cov_params


def information_criteria(model: GmmModel, n: int, log_likelihood: float | None = None) -> tuple[float, float]:
    """(AIC, BIC) from the total log-likelihood of the data the model was fit on."""
    ll = model.final_log_likelihood if log_likelihood is None else log_likelihood
    m = n_parameters(model.k, model.q, model.cov_type)
    return 2 * m - 2 * ll, m * np.log(n) - 2 * ll


def bhattacharyya(mu1, cov1, mu2, cov2) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    avg = (cov1 + cov2) / 2
    diff = mu1 - mu2
    try:
        L = linalg.cholesky(avg, lower=True)
    except linalg.LinAlgError:
        try:
            L = linalg.cholesky(avg + REG_COVAR * np.eye(len(diff)), lower=True)
        except linalg.LinAlgError:
            raise GmmError("averaged covariance is singular even after jitter") from None
    z = linalg.solve_triangular(L, diff, lower=True)
    logdet_avg = 2 * np.log(np.diag(L)).sum()
    logdet1 = np.linalg.slogdet(cov1)[1]
    logdet2 = np.linalg.slogdet(cov2)[1]
    return float(z @ z / 8 + 0.5 * (logdet_avg - 0.5 * (logdet1 + logdet2)))


def mean_pairwise_bhattacharyya(model: GmmModel) -> float:
    if model.k < 2:
        raise GmmError("need at least two components")
    full = model.full_covariances()
    vals = [bhattacharyya(model.means[i], full[i], model.means[j], full[j])
            for i, j in combinations(range(model.k), 2)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

@dataclass
class GmmCandidate:
    k: int
    cov_type: str
    aic: float
    bic: float
    mean_bhattacharyya: float
    restart_log_likelihoods: list
    chosen: bool = False

    def to_dict(self) -> dict:
        return dict(k=self.k, cov_type=self.cov_type, aic=self.aic, bic=self.bic,
                    mean_bhattacharyya=self.mean_bhattacharyya,
                    restart_log_likelihoods=list(self.restart_log_likelihoods), chosen=self.chosen)


@dataclass
class GmmSelectionReport:
    candidates: list = field(default_factory=list)
    band: float = 0.02

    @property
    def chosen(self) -> GmmCandidate:
        (c,) = [c for c in self.candidates if c.chosen]
        return c

    def to_dict(self) -> dict:
        return {"band": self.band, "candidates": [c.to_dict() for c in self.candidates]}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSelectionReport":
        return cls([GmmCandidate(**c) for c in d["candidates"]], d["band"])


def _within_band(value, best, band):
    return value <= best + band * abs(best)


def _fit_candidate(args):
    X, k, cov_type, restarts, seed, tol, max_iter = args
    fits = []
    for r in range(restarts):
        rseed = np.random.SeedSequence([seed, k, COV_TYPES.index(cov_type), r])
        fits.append(fit_gmm_em(X, k, cov_type, tol=tol, max_iter=max_iter, seed=rseed))
    lls = [f.final_log_likelihood for f in fits]
    best = fits[int(np.argmax(lls))]
    aic, bic = information_criteria(best, X.shape[0])
    dist = mean_pairwise_bhattacharyya(best) if k >= 2 else 0.0
    return best, GmmCandidate(k, cov_type, float(aic), float(bic), dist, lls)


def select_gmm(data, k_range=range(5, 21), cov_types=COV_TYPES, restarts: int = 5, seed: int = 0,
               tol: float = 1e-6, max_iter: int = 200, band: float = 0.02, threads: int = 1):
    """Grid over (k, covariance type); keep the best of ``restarts`` EM runs each.

    Candidates within ``band`` (relative) of both the best BIC and best AIC
    form a shortlist; the one with the largest mean pairwise Bhattacharyya
    distance wins, smaller k on ties.
    """
    X = np.asarray(data, dtype=np.float64)
    grid = [(int(k), c) for k in k_range for c in cov_types]
    results = parallel_map(_fit_candidate, [(X, k, c, restarts, seed, tol, max_iter) for k, c in grid], threads)
    models = [m for m, _ in results]
    cands = [c for _, c in results]
    best_bic = min(c.bic for c in cands)
    best_aic = min(c.aic for c in cands)
    short = [i for i, c in enumerate(cands)
             if _within_band(c.bic, best_bic, band) and _within_band(c.aic, best_aic, band)]
    if not short:
        log.info("no candidate within %.0f%% of both criteria; shortlisting on BIC only", band * 100)
        short = [i for i, c in enumerate(cands) if _within_band(c.bic, best_bic, band)]
    pick = min(short, key=lambda i: (-cands[i].mean_bhattacharyya, cands[i].k, i))
    cands[pick].chosen = True
    return models[pick], GmmSelectionReport(cands, band)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmmDayScores:
    label: int
    assigned_likelihood: float
    weighted_likelihood: float


def gmm_scores(model: GmmModel, data: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorized day scores: 1-based labels and both likelihood scores."""
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    d2, logdet = mahalanobis_sq(X, model)
    with np.errstate(divide="ignore"):
        wlp = np.log(model.weights) - 0.5 * (model.q * _LOG_2PI + logdet + d2)
    label = np.argmax(wlp, axis=1)
    surv = stats.chi2.sf(d2, df=model.q)
    return {
        "label": label + 1,
        "assigned_likelihood": surv[np.arange(len(X)), label],
        "weighted_likelihood": np.clip(surv @ model.weights, 0.0, 1.0),
        "survival": surv,
    }


def score_day_gmm(model: GmmModel, day) -> GmmDayScores:
    coords = getattr(day, "coords", day)
    s = gmm_scores(model, np.asarray(coords, dtype=np.float64)[None, :])
    return GmmDayScores(int(s["label"][0]), float(s["assigned_likelihood"][0]),
                        float(s["weighted_likelihood"][0]))


def predict_labels(model: GmmModel, data: np.ndarray) -> np.ndarray:
    return gmm_scores(model, data)["label"]
