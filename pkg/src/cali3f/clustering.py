"""Client grouping: k-means over user representations, round-robin delegate
sampling per cluster, and instance-weighted averaging of cluster models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from cali3f.rng import as_rng

log = logging.getLogger(__name__)

MAX_KMEANS_ITER = 100


class InfeasibleError(ValueError):
    pass


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # labels[user] = cluster id
    centroids: np.ndarray
    distortions: list[float] = field(default_factory=list)

    @property
    def num_clusters(self) -> int:
        return len(self.centroids)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_clusters)

    def as_dict(self) -> dict[int, int]:
        return {u: int(c) for u, c in enumerate(self.labels)}


@dataclass
class SamplingPlan:
    delegates: dict[int, np.ndarray]
    subordinates: dict[int, np.ndarray]

    def all_delegates(self) -> np.ndarray:
        parts = [d for d in self.delegates.values() if len(d)]
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    def cluster_of(self) -> dict[int, int]:
        return {int(u): p for p, ds in self.delegates.items() for u in ds}


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def _plus_plus_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        chosen.append(nxt)
        closest = np.minimum(closest, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def _repair_empty(points, labels, centroids, dists):
    """Give each empty cluster the point farthest from its own centroid."""
    k = len(centroids)
    while True:
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if len(empty) == 0:
            return labels
        own = dists[np.arange(len(points)), labels]
        donors = sizes[labels] > 1
        own = np.where(donors, own, -np.inf)
        far = int(np.argmax(own))
        labels[far] = empty[0]
        centroids[empty[0]] = points[far]
        dists[far] = np.inf
        dists[far, empty[0]] = 0.0


def _distortion(points, labels, centroids) -> float:
    return float(np.sum((points - centroids[labels]) ** 2))


def kmeans(points, n_clusters: int, seed) -> ClusterAssignment:
    """Lloyd's algorithm from k-means++ seeds.

    Stops when assignments no longer change or after 100 iterations.  Ties go
    to the lower cluster id (``argmin``).
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n_clusters < 1:
        raise InfeasibleError("need at least one cluster")
    if n < n_clusters:
        raise InfeasibleError(f"cannot form {n_clusters} clusters from {n} points")
    rng = as_rng(seed)
    centroids = _plus_plus_seeds(points, n_clusters, rng)
    labels = None
    history = []
    for _ in range(MAX_KMEANS_ITER):
        dists = _sq_dists(points, centroids)
        new_labels = np.argmin(dists, axis=1)
        new_labels = _repair_empty(points, new_labels, centroids, dists)
        if labels is not None:
            history.append(_distortion(points, new_labels, centroids))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(n_clusters):
            centroids[c] = points[labels == c].mean(axis=0)
        history.append(_distortion(points, labels, centroids))
    return ClusterAssignment(labels.astype(np.int64), centroids, history)


def clus_samp(assignment: ClusterAssignment, m: int, seed) -> SamplingPlan:
    """Pick ``m`` delegates one per cluster at a time, cycling in cluster-id order."""
    n = len(assignment.labels)
    if not 1 <= m <= n:
        raise InfeasibleError(f"cannot sample {m} delegates from {n} clients")
    rng = as_rng(seed)
    queues = [rng.permutation(assignment.members(p)) for p in range(assignment.num_clusters)]
    taken = [0] * len(queues)
    chosen = 0
    while chosen < m:
        for p, queue in enumerate(queues):
            if chosen == m:
                break
            if taken[p] < len(queue):
                taken[p] += 1
                chosen += 1
    delegates = {p: np.sort(q[:taken[p]]).astype(np.int64) for p, q in enumerate(queues)}
    subordinates = {p: np.sort(q[taken[p]:]).astype(np.int64) for p, q in enumerate(queues)}
    return SamplingPlan(delegates, subordinates)


def initial_grouping(representations, n_clusters: int, m: int, seed) -> tuple[ClusterAssignment, SamplingPlan]:
    rng = as_rng(seed)
    assignment = kmeans(representations, n_clusters, rng)
    return assignment, clus_samp(assignment, m, rng)


def clus_avg(cluster_models: dict, old: ClusterAssignment, new: ClusterAssignment,
             instance_counts) -> dict:
    """Rebuild cluster models after re-clustering.

    Each client brings the model of its previous cluster into the
    instance-weighted mean of its new cluster.
    """
    counts = np.asarray(instance_counts, dtype=float)
    missing = set(np.unique(old.labels).tolist()) - set(cluster_models)
    if missing:
        raise KeyError(f"no source model for clusters {sorted(missing)}")
    out = {}
    for p in range(new.num_clusters):
        members = new.members(p)
        weights = counts[members]
        total = weights.sum()
        if total <= 0:
            weights = np.ones(len(members))
            total = float(len(members))
        sources = old.labels[members]
        # accumulate per source cluster to keep the number of array ops small
        per_source: dict[int, float] = {}
        for src, w in zip(sources.tolist(), weights.tolist()):
            per_source[src] = per_source.get(src, 0.0) + w
        keys = next(iter(cluster_models.values())).keys()
        block = {}
        for k in keys:
            acc = None
            for src in sorted(per_source):
                term = (per_source[src] / total) * cluster_models[src][k]
                acc = term if acc is None else acc + term
            block[k] = acc
        out[p] = block
    return out


def write_assignment(path, assignment: ClusterAssignment) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\tcluster_id\n")
        for u, c in enumerate(assignment.labels.tolist()):
            fh.write(f"{u}\t{c}\n")
