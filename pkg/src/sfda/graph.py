"""Mutual k-nearest-neighbour affinity graphs over feature rows.

Neighbour search is exact (a KD-tree with candidate re-ranking so that equal
distances resolve to the lower sample index). Two weightings are offered:

``normalized_psd``
    ``w_ij = 1 / sqrt(d_i d_j)`` on mutual edges, i.e. the off-diagonal part of
    ``D^-1/2 (A + D) D^-1/2``. With ``self_weight=1`` the full matrix is PSD.
``reciprocal_mutual_count``
    ``w_ij = 1 / max(d_i, d_j)``.

``d_i`` is the mutual-neighbour degree of node ``i``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import ConfigError, ShapeError

SCHEMES = ("normalized_psd", "reciprocal_mutual_count")
METRICS = ("euclidean", "cosine")
TIE_TOL = 1e-9
PSD_MAX_N = 512


@dataclass(frozen=True)
class MutualKnnGraph:
    n: int
    k: int
    scheme: str
    self_weight: float
    weights: sp.csr_matrix  # symmetric, zero diagonal

    @property
    def degrees(self):
        return np.diff(self.weights.indptr)

    def edges(self):
        """``(i, j, w)`` triples with ``i < j``, sorted by ``(i, j)``."""
        upper = sp.triu(self.weights, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return [(int(upper.row[t]), int(upper.col[t]), float(upper.data[t])) for t in order]

    def dense(self):
        """Full affinity matrix including the self weights on the diagonal."""
        return self.weights.toarray() + self.self_weight * np.eye(self.n)


def _prepare(features, metric):
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"features must be a non-empty (N, D) matrix, got {x.shape}")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    return x


def knn_indices(features, k, metric="euclidean"):
    """Indices of each row's ``k`` nearest other rows, nearest first.

    Ties in distance are broken by ascending sample index.
    """
    x = _prepare(features, metric)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    # distances are ranked on a grid of TIE_TOL times the data scale, so that
    # mathematically equal distances tie exactly and fall back to index order
    step = TIE_TOL * max(float(np.abs(x).max()), np.finfo(float).tiny)
    tree = cKDTree(x)
    out = np.empty((n, k), dtype=np.int64)
    todo = np.arange(n)
    extra = 4
    while todo.size:
        m = min(n, k + 1 + extra)
        dist, idx = tree.query(x[todo], k=m)
        dist = np.round(np.atleast_2d(dist).reshape(len(todo), m) / step)
        idx = np.atleast_2d(idx).reshape(len(todo), m)
        # drop the query itself wherever it landed among equal-distance rows
        is_self = idx == todo[:, None]
        dist = np.where(is_self, np.inf, dist)
        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        # a tie straddling the query horizon may hide a lower-index candidate
        horizon = np.where(is_self.any(axis=1), dist[:, m - 2], dist[:, m - 1])
        unsure = (dist[:, k - 1] >= horizon) & (m < n)
        done = ~unsure
        out[todo[done]] = idx[done, :k]
        todo = todo[unsure]
        extra = 2 * extra + k
    return out


def build_mutual_knn(features, k, scheme="normalized_psd", metric="euclidean", self_weight=0.0):
    """Mutual k-NN graph: ``i ~ j`` iff each is among the other's ``k`` nearest.

    ``self_weight`` is the diagonal ``w_ii``; 0 matches practical use, 1 gives
    the positive semi-definite construction for ``normalized_psd``.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown weight scheme {scheme!r}")
    nbrs = knn_indices(features, k, metric)
    n = nbrs.shape[0]
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    mutual = a.multiply(a.T).tocsr()
    mutual.eliminate_zeros()
    deg = np.diff(mutual.indptr).astype(float)
    coo = mutual.tocoo()
    if scheme == "normalized_psd":
        w = 1.0 / np.sqrt(deg[coo.row] * deg[coo.col])
    else:
        w = 1.0 / np.maximum(deg[coo.row], deg[coo.col])
    weights = sp.csr_matrix((w, (coo.row, coo.col)), shape=(n, n))
    weights.sort_indices()
    return MutualKnnGraph(n=n, k=int(k), scheme=scheme, self_weight=float(self_weight),
                          weights=weights)


def laplacian_smooth(graph, probs):
    """Row ``i`` of the result is ``sum_j w_ij probs_j`` (self weight included)."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2 or p.shape[0] != graph.n:
        raise ShapeError(f"probs must have {graph.n} rows, got shape {p.shape}")
    out = graph.weights @ p
    if graph.self_weight:
        out = out + graph.self_weight * p
    return np.asarray(out)


def check_psd(graph, tol=1e-8):
    """True iff the smallest eigenvalue of ``W + W^T`` is at least ``-tol``."""
    if graph.n > PSD_MAX_N:
        raise ConfigError(f"check_psd is an exact eigensolve, limited to N <= {PSD_MAX_N}")
    w = graph.dense()
    return bool(np.linalg.eigvalsh(w + w.T).min() >= -tol)


def extended_neighbors(nbrs, k_ext):
    """For each row: neighbours-of-neighbours (first ``k_ext`` of each) minus self and direct ones."""
    n = nbrs.shape[0]
    out = []
    for i in range(n):
        cand = np.unique(nbrs[nbrs[i], :k_ext])
        drop = np.append(nbrs[i], i)
        out.append(cand[~np.isin(cand, drop)])
    return out


def dump_graph(graph, csv_path):
    """Write ``(i, j, w)`` triples to ``csv_path`` and a JSON header beside it."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j", "w"])
        for i, j, w in graph.edges():
            wr.writerow([i, j, repr(w)])
    header = {"n": graph.n, "k": graph.k, "scheme": graph.scheme, "self_weight": graph.self_weight}
    csv_path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_graph(csv_path):
    csv_path = Path(csv_path)
    header = json.loads(csv_path.with_suffix(".json").read_text())
    rows, cols, vals = [], [], []
    with csv_path.open() as fh:
        for rec in csv.DictReader(fh):
            i, j, w = int(rec["i"]), int(rec["j"]), float(rec["w"])
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
    n = header["n"]
    weights = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    weights.sort_indices()
    return MutualKnnGraph(n=n, k=header["k"], scheme=header["scheme"],
                          self_weight=header["self_weight"], weights=weights)
