"""Single-linkage agglomerative clustering over embeddings, using the learned
L1 metric (-ln of the similarity).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .branch import Embedding


@dataclass
class DistanceMatrix:
    """Condensed pairwise distances: entry for (i, j), i<j, sits at
    i*(2n-i-1)/2 + (j-i-1), the usual upper-triangular packing."""

    n: int
    condensed: np.ndarray

    def __post_init__(self):
        self.condensed = np.asarray(self.condensed, dtype=np.float64)
        expected = self.n * (self.n - 1) // 2
        if self.condensed.shape != (expected,):
            raise ValueError(
                f"condensed length {self.condensed.shape} does not match n={self.n}"
            )
        if not np.all(np.isfinite(self.condensed)) or np.any(self.condensed < 0):
            raise ValueError("distances must be finite and non-negative")

    def get(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        if i > j:
            i, j = j, i
        return float(self.condensed[i * (2 * self.n - i - 1) // 2 + (j - i - 1)])

    def full(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        k = 0
        for i in range(self.n):
            for j in range(i + 1, self.n):
                m[i, j] = m[j, i] = self.condensed[k]
                k += 1
        return m


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # one id in 0..k-1 per point
    k: int


@dataclass
class Merge:
    """One agglomeration event; cluster ids are the smallest member index."""

    distance: float
    id_a: int  # id_a < id_b
    id_b: int


def _as_vector(e) -> np.ndarray:
    return e.vector if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)


def pairwise_distances(embeddings: Sequence) -> DistanceMatrix:
    """L1 distances between all embedding pairs (= -ln similarity)."""
    vecs = [_as_vector(e) for e in embeddings]
    n = len(vecs)
    if n < 2:
        raise ValueError(f"need at least 2 embeddings, got {n}")
    dim = vecs[0].shape
    for v in vecs:
        if v.shape != dim:
            raise ValueError("embeddings must share one dimension")
    x = np.stack(vecs)
    chunks = [np.abs(x[i + 1 :] - x[i]).sum(axis=1) for i in range(n - 1)]
    return DistanceMatrix(n=n, condensed=np.concatenate(chunks))


def single_linkage_merges(dm: DistanceMatrix) -> list[Merge]:
    """The full merge sequence (n-1 events) under minimum linkage.

    Inter-cluster distances are maintained with the min-update rule; ties
    break toward the lexicographically smallest (id_a, id_b) cluster pair.
    """
    n = dm.n
    m = dm.full()
    np.fill_diagonal(m, np.inf)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    merges = []
    for _ in range(n - 1):
        masked = np.where(upper, m, np.inf)
        flat = int(np.argmin(masked))  # first occurrence = smallest (i, j)
        i, j = divmod(flat, n)
        merges.append(Merge(distance=float(masked[i, j]), id_a=i, id_b=j))
        merged = np.minimum(m[i], m[j])
        m[i, :] = merged
        m[:, i] = merged
        m[i, i] = np.inf
        m[j, :] = np.inf
        m[:, j] = np.inf
        upper[j, :] = False
        upper[:, j] = False
    return merges


def _labels_from_merges(n: int, merges: Sequence[Merge]) -> ClusterAssignment:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for mg in merges:
        ra, rb = find(mg.id_a), find(mg.id_b)
        # keep the smaller index as the representative
        lo, hi = min(ra, rb), max(ra, rb)
        parent[hi] = lo
    roots = [find(i) for i in range(n)]
    order = sorted(set(roots))
    relabel = {r: k for k, r in enumerate(order)}
    labels = np.asarray([relabel[r] for r in roots], dtype=np.int64)
    return ClusterAssignment(labels=labels, k=len(order))


def single_linkage(dm: DistanceMatrix, k: int | None = None,
                   threshold: float | None = None) -> ClusterAssignment:
    """Agglomerate until k clusters remain, or until the next merge distance
    would exceed `threshold`. With neither given, the merge sequence is cut at
    its largest distance gap. Cluster ids are 0..k-1, ordered by smallest
    member index."""
    if k is not None and threshold is not None:
        raise ValueError("give at most one of k and threshold")
    merges = single_linkage_merges(dm)
    if k is not None:
        if not 1 <= k <= dm.n:
            raise ValueError(f"k must be in 1..{dm.n}, got {k}")
        applied = merges[: dm.n - k]
    elif threshold is not None:
        applied = [mg for mg in merges if mg.distance <= threshold]
    else:
        dists = [mg.distance for mg in merges]
        gaps = np.diff(dists)
        if len(dists) < 2 or gaps.max() <= 0:
            applied = merges  # no gap structure: one cluster
        else:
            cut = int(np.argmax(gaps))
            applied = merges[: cut + 1]
    return _labels_from_merges(dm.n, applied)
