"""Cluster-stratified instance sampling and window-ready sequence building."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .bagio import Bag

DEFAULT_CLUSTERS = 10


@dataclass
class Clustering:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    cluster_sizes: np.ndarray
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0


@dataclass
class SampledSequence:
    features: np.ndarray  # (1, M_pad, F), padded rows are zero
    mask: np.ndarray  # (M_pad,) bool
    kept_indices: np.ndarray  # original instance indices in sequence order
    alpha: float = 100.0
    label: int = 0
    bag_id: str = ""

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    @property
    def padded_length(self) -> int:
        return self.mask.shape[0]


def _inertia(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diff = x - centroids[assign]
    return float(np.einsum("ij,ij->", diff, diff))


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining mass sits on chosen points; pick any unchosen index
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def kmeans(embeddings: np.ndarray, n_clusters: int = DEFAULT_CLUSTERS, seed=None,
           max_iter: int = 100, tol: float = 1e-6) -> Clustering:
    """Lloyd's k-means with k-means++ seeding.

    Stops when the relative drop in inertia falls below ``tol`` or after
    ``max_iter`` iterations. A cluster that empties is reseeded with the point
    farthest from its current centroid (taken from a cluster that can spare it).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    if n < n_clusters:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, n_clusters, rng)

    history: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        dists = _sq_dists(x, centroids)
        assign = dists.argmin(1)
        sizes = np.bincount(assign, minlength=n_clusters)
        for empty in np.flatnonzero(sizes == 0):
            point_d = dists[np.arange(n), assign]
            point_d = np.where(sizes[assign] > 1, point_d, -1.0)
            far = int(point_d.argmax())
            sizes[assign[far]] -= 1
            assign[far] = empty
            sizes[empty] = 1
        for c in range(n_clusters):
            centroids[c] = x[assign == c].mean(0)
        history.append(_inertia(x, centroids, assign))
        if len(history) > 1:
            prev = history[-2]
            if prev == 0.0 or (prev - history[-1]) / prev < tol:
                break
        elif history[-1] == 0.0:
            break

    sizes = np.bincount(assign, minlength=n_clusters)
    return Clustering(assign, centroids, _inertia(x, centroids, assign), sizes, history, it)


def kept_count(n_k: int, alpha: float) -> int:
    """Instances kept from a cluster of size ``n_k``: max(1, round(alpha * n_k / 100))."""
    want = int(np.floor(alpha * n_k / 100.0 + 0.5 + 1e-9))
    return min(n_k, max(1, want))


def stratified_sample(clustering: Clustering, alpha: float, seed=None) -> np.ndarray:
    """Keep a fixed percentage of every cluster, uniformly without replacement.

    Returns the kept instance indices, sorted ascending.
    """
    if not 0 < alpha <= 100:
        raise ValueError(f"alpha must be in (0, 100], got {alpha}")
    rng = np.random.default_rng(seed)
    kept = []
    for c in range(len(clustering.cluster_sizes)):
        members = np.flatnonzero(clustering.assignments == c)
        if members.size == 0:
            continue
        take = kept_count(members.size, alpha)
        kept.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(kept)) if kept else np.empty(0, dtype=np.int64)


def padded_length(m: int, window_base: int = 4) -> int:
    block = (4 * window_base) ** 2
    return -(-m // block) * block


def build_sequence(bag: Bag, kept: Optional[Sequence[int]] = None, window_base: int = 4,
                   alpha: float = 100.0) -> SampledSequence:
    """Raster-order the kept instances and zero-pad to a multiple of (4k)^2."""
    kept = np.arange(bag.n) if kept is None else np.unique(np.asarray(kept, dtype=np.int64))
    if kept.size == 0:
        raise ValueError("build_sequence needs at least one kept instance")
    if kept.min() < 0 or kept.max() >= bag.n:
        raise ValueError(f"kept indices must lie in [0, {bag.n})")
    rows, cols = bag.coords[kept, 0], bag.coords[kept, 1]
    order = kept[np.lexsort((cols, rows))]
    m = order.size
    m_pad = padded_length(m, window_base)
    feats = np.zeros((1, m_pad, bag.d))
    feats[0, :m] = bag.embeddings[order]
    mask = np.zeros(m_pad, dtype=bool)
    mask[:m] = True
    return SampledSequence(feats, mask, order, float(alpha), bag.label, bag.id)


def bag_seed(seed: Optional[int], bag_id: str) -> Optional[int]:
    """Per-bag seed that depends on the bag id, not on its position in a list."""
    if seed is None:
        return None
    return (int(seed) * 1_000_003 + zlib.crc32(bag_id.encode())) % (2**32)


def sample_bag(bag: Bag, alpha: float = 100.0, n_clusters: int = DEFAULT_CLUSTERS,
               window_base: int = 4, seed=None) -> SampledSequence:
    """Cluster, stratify and sequence one bag. Alpha of 100 skips clustering."""
    if not 0 < alpha <= 100:
        raise ValueError(f"alpha must be in (0, 100], got {alpha}")
    if alpha >= 100:
        return build_sequence(bag, None, window_base, alpha)
    rng = np.random.default_rng(bag_seed(seed, bag.id))
    k = min(n_clusters, bag.n)
    clustering = kmeans(bag.embeddings, k, seed=rng)
    kept = stratified_sample(clustering, alpha, seed=rng)
    return build_sequence(bag, kept, window_base, alpha)


class ClusterSampler(TransformerMixin, BaseEstimator):
    """Turn bags into padded, raster-ordered sequences after cluster sampling.

    Stateless: ``fit`` only validates parameters. Sampling is drawn once per
    bag from ``random_state`` and the bag id, so repeated calls agree.
    """

    def __init__(self, alpha=100.0, n_clusters=DEFAULT_CLUSTERS, window_base=4, random_state=0):
        self.alpha = alpha
        self.n_clusters = n_clusters
        self.window_base = window_base
        self.random_state = random_state

    def fit(self, X, y=None):
        if not 0 < self.alpha <= 100:
            raise ValueError(f"alpha must be in (0, 100], got {self.alpha}")
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1, got {self.n_clusters}")
        return self

    def transform(self, X):
        return [sample_bag(bag, self.alpha, self.n_clusters, self.window_base, self.random_state)
                for bag in X]
