"""K-means over entity embeddings, load-balance diagnostics and a PCA export."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .numeric import ParamSet, save_checkpoint


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    entity_ids: np.ndarray
    inertia: float
    inertia_history: List[float] = field(default_factory=list)
    n_repairs: int = 0
    n_iter: int = 0

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def assignment(self) -> Dict[int, int]:
        return {int(e): int(c) for e, c in zip(self.entity_ids, self.labels)}

    def cluster_of_item(self, n_items: Optional[int] = None) -> np.ndarray:
        """Dense entity-id -> cluster lookup; unknown ids map to -1."""
        n = int(self.entity_ids.max()) + 1 if n_items is None else n_items
        lut = np.full(n, -1, dtype=np.int64)
        lut[self.entity_ids] = self.labels
        return lut


def sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each step draws a few D^2-weighted candidates and keeps
    the one that lowers the total squared distance most."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    d2 = sq_distances(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cand = rng.choice(n, size=trials, p=d2 / total)
        else:
            cand = rng.choice(np.setdiff1d(np.arange(n), chosen), size=1)
        pots = np.minimum(d2[None, :], sq_distances(x, x[cand]).T)
        best = int(pots.sum(axis=1).argmin())
        chosen.append(int(cand[best]))
        d2 = pots[best]
    return x[chosen].copy()


def _assign(x, c):
    d = sq_distances(x, c)
    labels = d.argmin(axis=1)
    return labels, d[np.arange(len(x)), labels]


def _repair(x, c, labels, dist) -> int:
    """Reseed empty clusters at the point farthest from its centroid."""
    repairs = 0
    k = c.shape[0]
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        movable = sizes[labels] > 1
        cand = np.where(movable, dist, -1.0)
        f = int(cand.argmax())
        c[j] = x[f]
        labels[f] = j
        dist[f] = 0.0
        repairs += 1
    return repairs


def kmeans_fit(embeddings, K: int, seed=0, max_iters: int = 100, tol: float = 1e-6,
               entity_ids: Optional[Sequence[int]] = None) -> ClusterModel:
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if K < 1 or n < K:
        raise ValueError(f"need n >= K >= 1, got n={n}, K={K}")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    rng = np.random.default_rng(seed)
    c = _plus_plus(x, K, rng)
    history: List[float] = []
    repairs = 0
    it = 0
    for it in range(1, max_iters + 1):
        labels, dist = _assign(x, c)
        repairs += _repair(x, c, labels, dist)
        history.append(float(dist.sum()))
        new_c = c.copy()
        for j in range(K):
            members = labels == j
            if members.any():
                new_c[j] = x[members].mean(axis=0)
        shift = float(np.sqrt(((new_c - c) ** 2).sum(axis=1)).max())
        c = new_c
        if shift < tol:
            break
    labels, dist = _assign(x, c)
    repairs += _repair(x, c, labels, dist)
    inertia = float(sq_distances(x, c)[np.arange(n), labels].sum())
    history.append(inertia)
    ids = np.arange(n) if entity_ids is None else np.asarray(entity_ids)
    return ClusterModel(c, labels, ids, inertia, history, repairs, it)


def assign(model: ClusterModel, embedding) -> int:
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (model.centroids.shape[1],):
        raise ValueError(f"embedding dim {e.shape} does not match centroids {model.centroids.shape[1]}")
    d = ((model.centroids - e) ** 2).sum(axis=1)
    return int(d.argmin())


@dataclass
class BalanceReport:
    sizes: np.ndarray
    min_size: int
    max_size: int
    mean_size: float
    cv: float
    n_empty: int
    n_repairs: int
    imbalanced: bool


def balance_report(model: ClusterModel, threshold: float = 5.0) -> BalanceReport:
    sizes = np.bincount(model.labels, minlength=model.K)
    mean = float(sizes.mean())
    return BalanceReport(
        sizes=sizes,
        min_size=int(sizes.min()),
        max_size=int(sizes.max()),
        mean_size=mean,
        cv=float(sizes.std() / mean) if mean > 0 else 0.0,
        n_empty=int((sizes == 0).sum()),
        n_repairs=model.n_repairs,
        imbalanced=bool(sizes.max() / mean > threshold),
    )


def pca_2d(embeddings):
    """Projection onto the top-2 covariance eigenvectors (descending variance)."""
    x = np.asarray(embeddings, dtype=np.float64)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1][:, :2]
    return xc @ axes, axes, mu


def export_projection(embeddings, labels, path, entity_ids=None) -> np.ndarray:
    proj, _, _ = pca_2d(embeddings)
    ids = np.arange(len(proj)) if entity_ids is None else np.asarray(entity_ids)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("entity_id,x,y,cluster_id\n")
        for i, (px, py), c in zip(ids, proj, labels):
            fh.write(f"{int(i)},{px!r},{py!r},{int(c)}\n")
    return proj


def write_cluster_map(model: ClusterModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e, c in zip(model.entity_ids, model.labels):
            fh.write(f"{int(e)}\t{int(c)}\n")


def read_cluster_map(path) -> Dict[int, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'entity_id<TAB>cluster_id'")
            out[int(parts[0])] = int(parts[1])
    return out


def save_centroids(model: ClusterModel, path) -> None:
    ps = ParamSet()
    ps.add("centroids", model.centroids)
    save_checkpoint(ps, path)
