"""Equal-width feature quantization into one-hot bin indicators."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

BIN_GRID = (2, 3, 4, 5, 10, 15)


@dataclass(frozen=True, eq=False)
class QuantizerSpec:
    names: tuple  # features kept in the expansion
    source_columns: np.ndarray  # their column indices in the fitted matrix
    n_bins: int
    edges: np.ndarray  # (len(names), n_bins + 1), strictly increasing rows
    dropped: tuple = ()

    @property
    def width(self) -> int:
        return len(self.names) * self.n_bins

    def expanded_names(self) -> list[str]:
        return [f"{n}[bin{b + 1}]" for n in self.names for b in range(self.n_bins)]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "source_columns": self.source_columns.tolist(),
                "n_bins": self.n_bins, "edges": self.edges.tolist(), "dropped": list(self.dropped)}


def fit_quantizer(X: np.ndarray, n_bins: int, names=None) -> QuantizerSpec:
    """Per-column equal-width edges over the training [min, max].

    Constant columns cannot be binned and are dropped from the expansion.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("cannot fit a quantizer on zero rows")
    names = list(names) if names is not None else [f"f{i}" for i in range(X.shape[1])]
    lo, hi = X.min(axis=0), X.max(axis=0)
    ok = hi > lo
    dropped = tuple(n for n, good in zip(names, ok) if not good)
    if dropped:
        log.debug("dropping %d constant feature(s) from quantization: %s", len(dropped), ", ".join(dropped))
    cols = np.flatnonzero(ok)
    edges = np.array([np.linspace(lo[c], hi[c], n_bins + 1) for c in cols]).reshape(len(cols), n_bins + 1)
    bad = np.any(np.diff(edges, axis=1) <= 0, axis=1)
    if bad.any():
        # ranges so narrow that linspace collapses adjacent edges
        dropped += tuple(names[c] for c in cols[bad])
        cols, edges = cols[~bad], edges[~bad]
    return QuantizerSpec(tuple(names[c] for c in cols), cols, int(n_bins), edges, dropped)


def bin_indices(spec: QuantizerSpec, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))[:, spec.source_columns]
    idx = np.empty(X.shape, dtype=np.int64)
    for j in range(X.shape[1]):
        # inner edges only; values at an inner edge go to the upper bin, max to the last
        idx[:, j] = np.searchsorted(spec.edges[j, 1:-1], X[:, j], side="right")
    return idx


def quantize(spec: QuantizerSpec, X: np.ndarray) -> np.ndarray:
    """One-hot expansion, ``(n, n_kept * n_bins)``; out-of-range values clip to edge bins."""
    idx = bin_indices(spec, X)
    n, f = idx.shape
    out = np.zeros((n, f * spec.n_bins), dtype=np.float64)
    rows = np.repeat(np.arange(n), f)
    cols = (np.arange(f) * spec.n_bins)[None, :] + idx
    out[rows, cols.ravel()] = 1.0
    return out
