"""Balanced random forest: per-tree class-balanced bootstrap, Gini splits over
a random feature subset at each node, trees grown to purity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

N_TREES = 11


@njit(cache=True)
def _grow(XT, y, boot, max_features, feat, thr, left, right, npos, ntot, st_feats):
    """Grow one tree on rows ``boot`` of ``XT`` (features x rows); returns the node count.

    As in common CART implementations, features found constant in a node are
    remembered and never re-examined in its subtree.
    """
    n = boot.shape[0]
    F = XT.shape[0]
    work = boot.copy()
    cap = feat.shape[0]
    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_const = np.empty(cap, dtype=np.int64)
    vals = np.empty(n)
    labs = np.empty(n, dtype=np.int64)
    for f in range(F):
        st_feats[0, f] = f
    st_node[0], st_lo[0], st_hi[0], st_const[0] = 0, 0, n, 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node, lo, hi, nconst = st_node[top], st_lo[top], st_hi[top], st_const[top]
        feats = st_feats[top].copy()
        t = hi - lo
        p = 0
        for i in range(lo, hi):
            p += y[work[i]]
        npos[node] = p
        ntot[node] = t
        feat[node] = -1
        if p == 0 or p == t or t < 2:
            continue
        best_f, best_thr, best_imp = -1, 0.0, np.inf
        tried = 0
        fi = nconst
        while fi < F and tried < max_features:
            # lazy Fisher-Yates over the features not yet known to be constant
            r = fi + np.random.randint(F - fi)
            f = feats[r]
            feats[r] = feats[fi]
            feats[fi] = f
            row = XT[f]
            vmin, vmax = np.inf, -np.inf
            for i in range(t):
                v = row[work[lo + i]]
                vals[i] = v
                if v < vmin:
                    vmin = v
                if v > vmax:
                    vmax = v
            if vmax <= vmin:
                # constant here, so constant in every descendant too
                feats[fi] = feats[nconst]
                feats[nconst] = f
                nconst += 1
                fi += 1
                continue
            fi += 1
            tried += 1
            for i in range(t):
                labs[i] = y[work[lo + i]]
            two_valued = True
            nl = 0
            pl = 0
            for i in range(t):
                if vals[i] == vmin:
                    nl += 1
                    pl += labs[i]
                elif vals[i] != vmax:
                    two_valued = False
                    break
            if two_valued:
                # one-hot columns: a single candidate threshold
                nr = t - nl
                pr = p - pl
                gl = 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
                gr = 1.0 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2
                imp = nl * gl + nr * gr
                if imp < best_imp - 1e-12:
                    best_imp, best_f, best_thr = imp, f, 0.5 * (vmin + vmax)
                continue
            order = np.argsort(vals[:t], kind="mergesort")
            pl = 0
            for i in range(t - 1):
                pl += labs[order[i]]
                a, b = vals[order[i]], vals[order[i + 1]]
                if a == b:
                    continue
                nl = i + 1
                nr = t - nl
                pr = p - pl
                gl = 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
                gr = 1.0 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2
                imp = nl * gl + nr * gr
                if imp < best_imp - 1e-12:
                    best_imp, best_f, best_thr = imp, f, 0.5 * (a + b)
        if best_f < 0:
            continue
        # partition work[lo:hi] on the split
        row = XT[best_f]
        i, j = lo, hi - 1
        while i <= j:
            if row[work[i]] <= best_thr:
                i += 1
            else:
                tmp = work[i]
                work[i] = work[j]
                work[j] = tmp
                j -= 1
        feat[node], thr[node] = best_f, best_thr
        left[node], right[node] = n_nodes, n_nodes + 1
        for c in range(2):
            st_node[top + c] = n_nodes + c
            st_const[top + c] = nconst
            st_feats[top + c] = feats
        st_lo[top], st_hi[top] = lo, i
        st_lo[top + 1], st_hi[top + 1] = i, hi
        top += 2
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def _fit_forest(XT, y, seeds, max_features, feat, thr, left, right, npos, ntot, counts, boots):
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    m = min(pos.shape[0], neg.shape[0])
    st_feats = np.empty((feat.shape[1], XT.shape[0]), dtype=np.int64)
    for t in range(seeds.shape[0]):
        np.random.seed(seeds[t])
        boot = np.empty(2 * m, dtype=np.int64)
        for i in range(m):
            boot[i] = pos[np.random.randint(pos.shape[0])]
            boot[m + i] = neg[np.random.randint(neg.shape[0])]
        boots[t] = boot
        counts[t] = _grow(XT, y, boot, max_features, feat[t], thr[t], left[t], right[t], npos[t], ntot[t],
                          st_feats)


_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(cache=True)
def _popcount(x):
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> np.uint64(56)


@njit(cache=True)
def _count(a, b, c):
    s = 0
    for w in range(a.shape[0]):
        s += _popcount(a[w] & b[w] & c[w])
    return s


@njit(cache=True)
def _grow_binary(X, y, boot, max_features, feat, thr, left, right, npos, ntot, st_bits):
    """Same tree as :func:`_grow` semantics for 0/1 data, with rows held as bitsets
    over bootstrap positions so each candidate split costs a few popcounts."""
    n = boot.shape[0]
    F = X.shape[1]
    W = (n + 63) // 64
    fbits = np.zeros((F, W), dtype=np.uint64)
    pbits = np.zeros(W, dtype=np.uint64)
    ones = np.zeros(W, dtype=np.uint64)
    for i in range(n):
        w, b = i // 64, np.uint64(1) << np.uint64(i % 64)
        ones[w] |= b
        if y[boot[i]] == 1:
            pbits[w] |= b
        row = X[boot[i]]
        for f in range(F):
            if row[f] > 0.5:
                fbits[f, w] |= b
    perm = np.arange(F)
    cap = feat.shape[0]
    st_node = np.empty(cap, dtype=np.int64)
    st_bits[0, :W] = ones
    st_node[0] = 0
    top = 1
    n_nodes = 1
    nb = np.empty(W, dtype=np.uint64)
    while top > 0:
        top -= 1
        node = st_node[top]
        nb[:] = st_bits[top, :W]
        t = _count(nb, ones, ones)
        p = _count(nb, pbits, ones)
        npos[node] = p
        ntot[node] = t
        feat[node] = -1
        if p == 0 or p == t or t < 2:
            continue
        best_f, best_imp = -1, np.inf
        tried = 0
        for fi in range(F):
            if tried >= max_features:
                break
            r = fi + np.random.randint(F - fi)
            f = perm[r]
            perm[r] = perm[fi]
            perm[fi] = f
            n1 = _count(nb, fbits[f], ones)
            if n1 == 0 or n1 == t:
                continue
            tried += 1
            p1 = _count(nb, fbits[f], pbits)
            nl, pl = t - n1, p - p1
            gl = 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
            gr = 1.0 - (p1 / n1) ** 2 - ((n1 - p1) / n1) ** 2
            imp = nl * gl + n1 * gr
            if imp < best_imp - 1e-12:
                best_imp, best_f = imp, f
        if best_f < 0:
            continue
        feat[node], thr[node] = best_f, 0.5
        left[node], right[node] = n_nodes, n_nodes + 1
        # the right child is pushed first so the left child is expanded next
        for w in range(W):
            st_bits[top, w] = nb[w] & fbits[best_f, w]
            st_bits[top + 1, w] = nb[w] & ~fbits[best_f, w]
        st_node[top], st_node[top + 1] = n_nodes + 1, n_nodes
        top += 2
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def _fit_forest_binary(X, y, seeds, max_features, feat, thr, left, right, npos, ntot, counts, boots):
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    m = min(pos.shape[0], neg.shape[0])
    st_bits = np.empty((feat.shape[1], (2 * m + 63) // 64), dtype=np.uint64)
    for t in range(seeds.shape[0]):
        np.random.seed(seeds[t])
        boot = np.empty(2 * m, dtype=np.int64)
        for i in range(m):
            boot[i] = pos[np.random.randint(pos.shape[0])]
            boot[m + i] = neg[np.random.randint(neg.shape[0])]
        boots[t] = boot
        counts[t] = _grow_binary(X, y, boot, max_features, feat[t], thr[t], left[t], right[t],
                                 npos[t], ntot[t], st_bits)


@njit(cache=True)
def _predict(X, feat, thr, left, right, npos, ntot):
    n = X.shape[0]
    T = feat.shape[0]
    out = np.zeros(n)
    for r in range(n):
        s = 0.0
        for t in range(T):
            node = 0
            while feat[t, node] >= 0:
                if X[r, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            s += npos[t, node] / ntot[t, node]
        out[r] = s / T
    return out


@dataclass(frozen=True, eq=False)
class BrfModel:
    feature: np.ndarray  # (T, cap) split feature, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_pos: np.ndarray  # class counts of the bootstrap rows reaching each node
    n_tot: np.ndarray
    n_nodes: np.ndarray
    bootstrap: np.ndarray  # (T, 2m) row indices; first half positive, second negative
    max_features: int
    n_features: int

    @property
    def n_trees(self) -> int:
        return self.feature.shape[0]

    def bootstrap_class_counts(self, y) -> np.ndarray:
        """(T, 2) negative/positive counts in each tree's bootstrap."""
        y = np.asarray(y, dtype=np.int64)
        return np.stack([np.bincount(y[b], minlength=2) for b in self.bootstrap])

    def predict_proba(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _predict(X, self.feature, self.threshold, self.left, self.right, self.n_pos, self.n_tot)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int64)


def tree_seeds(seed, n_trees: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint32).astype(np.int64)


def fit_brf(X, y, n_trees: int = N_TREES, seed=0, max_features: int | None = None) -> BrfModel:
    """Fit the forest.  ``max_features`` defaults to ceil(sqrt(F))."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y lengths differ")
    if set(np.unique(y).tolist()) != {0, 1}:
        raise ValueError("balanced random forest needs both classes present")
    F = X.shape[1]
    if F == 0:
        raise ValueError("no features")
    mf = max_features or max(1, math.ceil(math.sqrt(F)))
    m = int(min((y == 1).sum(), (y == 0).sum()))
    cap = 4 * m + 1
    feat = np.full((n_trees, cap), -1, dtype=np.int64)
    thr = np.zeros((n_trees, cap))
    left = np.zeros((n_trees, cap), dtype=np.int64)
    right = np.zeros((n_trees, cap), dtype=np.int64)
    npos = np.zeros((n_trees, cap), dtype=np.int64)
    ntot = np.ones((n_trees, cap), dtype=np.int64)
    counts = np.zeros(n_trees, dtype=np.int64)
    boots = np.zeros((n_trees, 2 * m), dtype=np.int64)
    if np.all((X == 0) | (X == 1)):
        _fit_forest_binary(X, y, tree_seeds(seed, n_trees), mf, feat, thr, left, right, npos, ntot, counts, boots)
    else:
        _fit_forest(np.ascontiguousarray(X.T), y, tree_seeds(seed, n_trees), mf, feat, thr, left, right, npos,
                    ntot, counts, boots)
    return BrfModel(feat, thr, left, right, npos, ntot, counts, boots, mf, F)
