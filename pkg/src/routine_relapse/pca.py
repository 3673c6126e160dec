"""Principal components of flattened templates via covariance eigendecomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_COMPONENTS = 200


class RankError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (q, d), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def q(self) -> int:
        return self.components.shape[0]

    def transform(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) @ self.components + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PcaModel":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in
                     ("mean", "components", "explained_variance", "explained_variance_ratio")))


def fit_pca(data: np.ndarray, q: int | None = None) -> PcaModel:
    """Top-``q`` eigenvectors of the sample covariance of ``data`` (rows = days).

    ``q=None`` keeps ``min(200, rank)`` components.  Eigenvector signs are fixed
    so the largest-magnitude loading of each component is positive.
    """
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval)[::-1]
    eigval = np.clip(eigval[order], 0.0, None)
    eigvec = eigvec[:, order]
    rank = int(np.linalg.matrix_rank(centered)) if n > 1 else 0
    if q is None:
        q = min(DEFAULT_MAX_COMPONENTS, rank)
    if q < 1:
        raise RankError("data has rank 0; no components to keep")
    if q > n:
        raise ValueError(f"q={q} exceeds the number of rows n={n}")
    if q > rank:
        raise RankError(f"q={q} exceeds the achievable rank {rank}")
    comps = eigvec[:, :q].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(q), pivot])
    comps *= signs[:, None]
    total = eigval.sum()
    ratio = eigval[:q] / total if total > 0 else np.zeros(q)
    return PcaModel(mean, comps, eigval[:q].copy(), ratio)


@dataclass(frozen=True, eq=False)
class EmbeddedDay:
    patient_id: str
    date: object
    coords: np.ndarray


def project(model: PcaModel, template) -> EmbeddedDay:
    """Embed one DailyTemplate into PCA space."""
    coords = model.transform(np.asarray(template.values, dtype=np.float64).reshape(-1))
    return EmbeddedDay(template.patient_id, template.date, coords)
