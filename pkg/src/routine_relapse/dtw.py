"""Dependent multivariate dynamic time warping between daily templates.

All channels share one alignment.  The local cost between hour ``i`` of ``a``
and hour ``j`` of ``b`` is the Euclidean norm across channels, and

    D(i, j) = c(i, j) + min(D(i-1, j), D(i, j-1), D(i-1, j-1))

with no warping window.  The distance is ``D(T, T)``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .parallel import parallel_map


@njit(cache=True)
def _dp(cost):
    n, m = cost.shape
    acc = np.empty((n, m))
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        for j in range(1, m):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = cost[i, j] + best
    return acc[n - 1, m - 1]


@njit(cache=True)
def _local_cost(a, b):
    # a: (T1, C), b: (T2, C), time-major
    n, c = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(c):
                d = a[i, k] - b[j, k]
                s += d * d
            out[i, j] = np.sqrt(s)
    return out


def _as_time_major(x) -> np.ndarray:
    values = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if values.ndim == 1:
        return values[:, None]
    if values.ndim != 2:
        raise ValueError(f"expected a (channels, time) array, got shape {values.shape}")
    return np.ascontiguousarray(values.T)


def dtw_distance(a, b) -> float:
    """DTW between two templates (``(channels, hours)`` grids) or 1-D series.

    For 1-D input the local cost reduces to the absolute difference.
    """
    ta, tb = _as_time_major(a), _as_time_major(b)
    if ta.shape[1] != tb.shape[1]:
        raise ValueError(f"channel mismatch: {ta.shape[1]} vs {tb.shape[1]}")
    if ta.shape[0] == 0 or tb.shape[0] == 0:
        raise ValueError("empty series")
    return float(_dp(_local_cost(ta, tb)))


@njit(cache=True)
def _dp_row(gram, norm_a, norm_b, out):
    # gram: (T, m*T) dot products between hours of one template and hours of m others
    T = norm_a.shape[0]
    m = norm_b.shape[0]
    cost = np.empty((T, T))
    for r in range(m):
        for i in range(T):
            for j in range(T):
                sq = norm_a[i] + norm_b[r, j] - 2.0 * gram[i, r * T + j]
                scale = norm_a[i] + norm_b[r, j]
                if sq <= 1e-12 * scale:
                    sq = 0.0
                cost[i, j] = np.sqrt(sq)
        out[r] = _dp(cost)


def _rows(args):
    stack, norms, rows = args
    n, T, _ = stack.shape
    result = []
    for i in rows:
        others = stack[i + 1:]
        out = np.zeros(n - i - 1)
        if others.shape[0]:
            gram = stack[i] @ others.reshape(-1, stack.shape[2]).T
            _dp_row(gram, norms[i], norms[i + 1:], out)
        result.append(out)
    return result


def pairwise_dtw_matrix(templates, threads: int = 1, block: int = 64) -> np.ndarray:
    """Symmetric ``n x n`` DTW matrix with a zero diagonal.

    Local costs come from the expansion ``|x|^2 + |y|^2 - 2 x.y`` so the
    inner products run through BLAS; the upper triangle is computed and
    mirrored.
    """
    arrays = [np.asarray(getattr(t, "values", t), dtype=np.float64) for t in templates]
    n = len(arrays)
    if n == 0:
        return np.zeros((0, 0))
    stack = np.ascontiguousarray(np.stack([_as_time_major(a) for a in arrays]))
    norms = np.einsum("ntc,ntc->nt", stack, stack)
    chunks = [range(s, min(s + block, n)) for s in range(0, n, block)]
    parts = parallel_map(_rows, [(stack, norms, c) for c in chunks], threads)
    out = np.zeros((n, n))
    i = 0
    for part in parts:
        for row in part:
            out[i, i + 1:] = row
            i += 1
    out = out + out.T
    return out


@njit(cache=True)
def _cross(A, B, out):
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = _dp(_local_cost(A[i], B[j]))


def cross_dtw(a_templates, b_templates) -> np.ndarray:
    """``len(a) x len(b)`` DTW distances between two template collections."""
    A = np.ascontiguousarray(np.stack([_as_time_major(t) for t in a_templates]))
    B = np.ascontiguousarray(np.stack([_as_time_major(t) for t in b_templates]))
    out = np.empty((A.shape[0], B.shape[0]))
    _cross(A, B, out)
    return out
