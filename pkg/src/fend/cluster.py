"""Hierarchical k-means over trajectory embeddings, with prototypes and densities."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .trajdata import ConfigError


@dataclass
class ClusterConfig:
    levels: tuple[int, ...] = (20, 50, 100)
    max_iters: int = 100
    restarts: int = 3
    alpha: float = 10.0
    clamp_percentiles: tuple[float, float] = (10.0, 90.0)

    def scaled_levels(self, n: int) -> tuple[int, ...]:
        """Cap each level at n/5 clusters (at least 2) for small datasets."""
        cap = max(2, n // 5)
        return tuple(max(2, min(k, cap)) for k in self.levels)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int) -> KMeansResult:
    k = len(centroids)
    history = []
    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        new_assign = d2.argmin(1)
        inertia = float(d2[np.arange(len(x)), new_assign].sum())
        history.append(inertia)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        new_c = np.zeros_like(centroids)
        np.add.at(new_c, assign, x)
        nonempty = counts > 0
        new_c[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            # re-seed empty clusters at the points farthest from their centroid
            point_d = d2[np.arange(len(x)), assign]
            taken = set()
            for j in np.flatnonzero(~nonempty):
                for idx in np.argsort(-point_d, kind="stable"):
                    if idx not in taken and counts[assign[idx]] > 1:
                        break
                taken.add(int(idx))
                counts[assign[idx]] -= 1
                new_c[j] = x[idx]
        centroids = new_c
    d2 = _sq_dists(x, centroids)
    assign = d2.argmin(1)
    inertia = float(d2[np.arange(len(x)), assign].sum())
    if not history or inertia != history[-1]:
        history.append(inertia)
    return KMeansResult(centroids, assign, inertia, history)


def kmeans(features: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
           restarts: int = 3) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``restarts`` by inertia."""
    x = np.asarray(features, dtype=np.float64)
    if k < 1 or len(x) < k:
        raise ConfigError("k", f"need 1 <= k <= n, got k={k}, n={len(x)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        res = _lloyd(x, _kmeanspp(x, k, rng), max_iters)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def raw_density(member_features: np.ndarray, prototype: np.ndarray, alpha: float = 10.0) -> float:
    """Mean member distance to the prototype, damped by log(Z + alpha)."""
    member_features = np.atleast_2d(member_features)
    z = len(member_features)
    if z < 1:
        raise ValueError("density needs at least one member")
    dist = np.linalg.norm(member_features - prototype, axis=1).sum()
    return float(dist / (z * math.log(z + alpha)))


def clamp_densities(phi: np.ndarray, percentiles: tuple[float, float] = (10.0, 90.0)) -> np.ndarray:
    lo, hi = np.percentile(phi, percentiles)
    if hi <= 0:
        # every cluster degenerate; fall back to unit temperature
        return np.ones_like(phi)
    if lo <= 0:
        lo = phi[phi > 0].min()
    return np.clip(phi, lo, hi)


def density(member_features: np.ndarray, prototype: np.ndarray, alpha: float = 10.0,
            bounds: tuple[float, float] | None = None) -> float:
    phi = raw_density(member_features, prototype, alpha)
    if bounds is not None:
        phi = min(max(phi, bounds[0]), bounds[1])
    return phi


def prototypes_and_densities(features: np.ndarray, assignments: np.ndarray, k: int,
                             alpha: float = 10.0,
                             percentiles: tuple[float, float] = (10.0, 90.0)) -> tuple[np.ndarray, np.ndarray]:
    """Cluster means and clamped densities. Empty clusters keep a zero prototype."""
    protos = np.zeros((k, features.shape[1]))
    counts = np.bincount(assignments, minlength=k)
    np.add.at(protos, assignments, features)
    nonempty = counts > 0
    protos[nonempty] /= counts[nonempty, None]
    phi = np.zeros(k)
    for j in np.flatnonzero(nonempty):
        phi[j] = raw_density(features[assignments == j], protos[j], alpha)
    phi[nonempty] = clamp_densities(phi[nonempty], percentiles)
    phi[~nonempty] = phi[nonempty].max() if nonempty.any() else 1.0
    return protos, phi


@dataclass
class ClusterLevel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray  # aligned with ClusterModel.sample_ids
    prototypes: np.ndarray
    densities: np.ndarray
    counts: np.ndarray


@dataclass
class ClusterModel:
    sample_ids: np.ndarray
    levels: list[ClusterLevel]
    alpha: float = 10.0

    def labels(self, level: int = -1) -> np.ndarray:
        return self.levels[level].assignments

    def label_map(self) -> dict[int, np.ndarray]:
        """sample_id -> assignment per level."""
        stacked = np.stack([lv.assignments for lv in self.levels], axis=1)
        return {int(s): stacked[i] for i, s in enumerate(self.sample_ids)}

    def to_json(self) -> str:
        doc = {
            "alpha": self.alpha,
            "sample_ids": self.sample_ids.tolist(),
            "levels": [
                {"k": lv.k, "centroids": lv.centroids.tolist(), "assignments": lv.assignments.tolist(),
                 "prototypes": lv.prototypes.tolist(), "densities": lv.densities.tolist(),
                 "counts": lv.counts.tolist()}
                for lv in self.levels
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        doc = json.loads(text)
        levels = [ClusterLevel(d["k"], np.array(d["centroids"]), np.array(d["assignments"], dtype=np.int64),
                               np.array(d["prototypes"]), np.array(d["densities"]),
                               np.array(d["counts"], dtype=np.int64)) for d in doc["levels"]]
        return cls(np.array(doc["sample_ids"], dtype=np.int64), levels, doc["alpha"])

    def write_assignments_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "level", "cluster"])
            for m, lv in enumerate(self.levels):
                for sid, c in zip(self.sample_ids, lv.assignments):
                    w.writerow([int(sid), m, int(c)])


def build_hierarchy(features: np.ndarray, cfg: ClusterConfig, seed: int = 0,
                    sample_ids=None, scale_levels: bool = True) -> ClusterModel:
    """One independent k-means per level; the seed of each level depends only on its k."""
    x = np.asarray(features, dtype=np.float64)
    levels = cfg.scaled_levels(len(x)) if scale_levels else tuple(cfg.levels)
    if max(levels) > len(x):
        raise ConfigError("levels", f"{max(levels)} clusters requested for {len(x)} samples")
    out = []
    for k in levels:
        res = kmeans(x, k, seed=seed * 1000 + k, max_iters=cfg.max_iters, restarts=cfg.restarts)
        protos, phi = prototypes_and_densities(x, res.assignments, k, cfg.alpha, cfg.clamp_percentiles)
        out.append(ClusterLevel(k, res.centroids, res.assignments, protos, phi,
                                np.bincount(res.assignments, minlength=k)))
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    return ClusterModel(ids, out, cfg.alpha)
