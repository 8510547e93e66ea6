"""Category-agnostic clusters over target features.

k-means (Lloyd iterations, k-means++ seeding), gap-statistic choice of K, and
the cosine-softmax inherent cluster distribution used as fixed supervision
for the clustering branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datagen import ValidationError


class ClusteringError(RuntimeError):
    pass


@dataclass
class FeatureTable:
    rows: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValidationError("feature rows must form a 2-D array")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) != len(self.rows):
            raise ValidationError("ids and rows differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationError("feature ids must be unique")
        if not np.all(np.isfinite(self.rows)):
            raise ValidationError("feature rows must be finite")

    @classmethod
    def from_array(cls, rows) -> "FeatureTable":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows, np.arange(len(rows)))

    def __len__(self):
        return len(self.rows)


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignment: dict
    rho: float
    inertia: float
    inertia_trace: list = field(default_factory=list, compare=False)

    @property
    def K(self) -> int:
        return len(self.centroids)

    @property
    def d_feat(self) -> int:
        return self.centroids.shape[1]

    def labels_for(self, ids) -> np.ndarray:
        return np.array([self.assignment[int(i)] for i in ids], dtype=np.int64)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _repair_empty(x, labels, d2, K):
    counts = np.bincount(labels, minlength=K)
    for k in np.flatnonzero(counts == 0):
        own = d2[np.arange(len(x)), labels]
        # steal only from clusters that keep at least one member
        own = np.where(np.bincount(labels, minlength=K)[labels] > 1, own, -1.0)
        far = int(np.argmax(own))
        labels[far] = k
    return labels


def _means(x, labels, K):
    sums = np.zeros((K, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    return sums / counts[:, None]


def _lloyd(x, K, rng, max_iter, tol):
    centroids = _kmeanspp(x, K, rng)
    d2 = _sq_dists(x, centroids)
    labels = _repair_empty(x, d2.argmin(1), d2, K)
    centroids = _means(x, labels, K)
    trace = [float(((x - centroids[labels]) ** 2).sum())]
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_labels = _repair_empty(x, d2.argmin(1), d2, K)
        new_centroids = _means(x, new_labels, K)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(1)).max())
        labels, centroids = new_labels, new_centroids
        trace.append(float(((x - centroids[labels]) ** 2).sum()))
        if shift <= tol:
            break
    return centroids, labels, trace


def kmeans(table: FeatureTable, K: int, seed: int, max_iter: int = 300, tol: float = 1e-10,
           rho: float = 10.0, n_init: int = 1, check_nonzero: bool = True) -> ClusterModel:
    """Lloyd's algorithm; the best of ``n_init`` k-means++ restarts is kept."""
    x = table.rows
    if K < 1:
        raise ValidationError("K must be >= 1")
    if K > len(x):
        raise ValidationError(f"K={K} exceeds the number of rows ({len(x)})")
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    if tol < 0:
        raise ValidationError("tol must be nonnegative")
    if rho <= 0:
        raise ValidationError("rho must be positive")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, K, rng, max_iter, tol)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    centroids, labels, trace = best
    if check_nonzero and np.any(np.linalg.norm(centroids, axis=1) == 0.0):
        raise ClusteringError("a centroid converged to the zero vector; cosine similarity is undefined")
    assignment = {int(i): int(k) for i, k in zip(table.ids, labels)}
    return ClusterModel(centroids, assignment, float(rho), trace[-1], trace)


def _cosine_softmax_rows(x: np.ndarray, c: np.ndarray, rho: float) -> np.ndarray:
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(xn == 0):
        raise ValidationError("zero feature vector: cosine similarity undefined")
    if np.any(cn == 0):
        raise ValidationError("zero centroid: cosine similarity undefined")
    logits = rho * (x / xn) @ (c / cn).T
    logits -= logits.max(1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(1, keepdims=True)


def inherent_distribution(x, model: ClusterModel) -> np.ndarray:
    """Softmax over rho-scaled cosines to every centroid.

    Accepts one vector or a (n, d_feat) array of vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.shape[1] != model.d_feat:
        raise ValidationError(f"feature dimension {x2.shape[1]} != centroid dimension {model.d_feat}")
    p = _cosine_softmax_rows(x2, model.centroids, model.rho)
    return p[0] if single else p


def centroid_cosine_matrix(model: ClusterModel) -> np.ndarray:
    c = model.centroids
    n = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValidationError("zero centroid: cosine similarity undefined")
    u = c / n
    m = u @ u.T
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    return m


def gap_statistic(table: FeatureTable, k_values: Sequence[int], n_refs: int, seed: int,
                  n_init: int = 3) -> tuple:
    """Return (gap, s) arrays for each K in ``k_values``.

    s is the standard deviation of the reference log-inertias scaled by
    sqrt(1 + 1/n_refs).
    """
    x = table.rows
    lo, hi = x.min(0), x.max(0)
    ss = np.random.SeedSequence(seed)
    ref_rngs = [np.random.default_rng(s) for s in ss.spawn(n_refs)]
    refs = [FeatureTable.from_array(r.uniform(lo, hi, size=x.shape)) for r in ref_rngs]
    gaps, sks = [], []
    for K in k_values:
        w = kmeans(table, K, seed, n_init=n_init, check_nonzero=False).inertia
        ref_logs = np.array([np.log(max(kmeans(ref, K, seed + 1 + j, n_init=n_init,
                                                check_nonzero=False).inertia, 1e-300))
                             for j, ref in enumerate(refs)])
        gaps.append(ref_logs.mean() - np.log(max(w, 1e-300)))
        sks.append(ref_logs.std() * np.sqrt(1.0 + 1.0 / n_refs))
    return np.array(gaps), np.array(sks)


def select_k_gap(table: FeatureTable, k_min: int, k_max: int, n_refs: int = 10, seed: int = 0,
                 n_init: int = 3) -> int:
    if not 1 <= k_min <= k_max <= len(table):
        raise ValidationError("need 1 <= k_min <= k_max <= number of rows")
    if n_refs < 1:
        raise ValidationError("n_refs must be >= 1")
    if k_min == k_max:
        return k_min
    ks = list(range(k_min, k_max + 1))
    gaps, sks = gap_statistic(table, ks, n_refs, seed, n_init=n_init)
    for i in range(len(ks) - 1):
        if gaps[i] >= gaps[i + 1] - sks[i + 1]:
            return ks[i]
    return k_max


def refresh_clusters(model: ClusterModel, new_table: FeatureTable, seed: int, **kw) -> ClusterModel:
    if len(new_table) == 0:
        raise ValidationError("cannot refresh clusters on an empty feature table")
    return kmeans(new_table, model.K, seed, rho=model.rho, **kw)


def assignment_entropy(model: ClusterModel) -> float:
    """Shannon entropy of the cluster-size histogram."""
    counts = np.bincount(np.fromiter(model.assignment.values(), dtype=np.int64), minlength=model.K)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def save_cluster_model(model: ClusterModel, path) -> None:
    lines = [f"{model.K} {model.d_feat} {model.rho!r}"]
    lines += [" ".join(format(v, ".17g") for v in c) for c in model.centroids]
    lines += [f"{i} {k}" for i, k in sorted(model.assignment.items())]
    lines.append(f"# inertia {model.inertia!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_cluster_model(path) -> ClusterModel:
    lines = [ln for ln in Path(path).read_text().split("\n") if ln.strip()]
    K, d, rho = lines[0].split()
    K, d = int(K), int(d)
    centroids = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + K]]).reshape(K, d)
    assignment = {}
    inertia: Optional[float] = None
    for ln in lines[1 + K:]:
        if ln.startswith("# inertia"):
            inertia = float(ln.split()[-1])
            continue
        i, k = ln.split()
        assignment[int(i)] = int(k)
    if inertia is None:
        ids = sorted(assignment)
        inertia = float("nan") if ids else 0.0
    return ClusterModel(centroids, assignment, float(rho), inertia)
