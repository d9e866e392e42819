"""Balanced K-Means split of FFN intermediate neurons into equal-sized
experts. Clustering runs on the raw up-projection rows; the resulting
assignment governs the matching gate rows and down columns, so no parameter
ever changes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ModelBundle


@dataclass(frozen=True)
class ClusterConfig:
    n_experts: int = 256
    max_iterations: int = 100
    seed: int = 0
    init: str = "kmeans++"  # or "random"

    def __post_init__(self):
        if self.n_experts < 1 or self.max_iterations < 1:
            raise ValueError("n_experts and max_iterations must be >= 1")
        if self.init not in ("kmeans++", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class ExpertPartition:
    n_layers: int
    d_ff: int
    n_experts: int
    assignment: list[np.ndarray]  # per layer, length d_ff, values in [0, E)
    seed: int

    def __post_init__(self):
        if len(self.assignment) != self.n_layers:
            raise ValueError("assignment list length != n_layers")
        size = self.d_ff // self.n_experts
        for li, vec in enumerate(self.assignment):
            vec = np.asarray(vec, dtype=np.int64)
            self.assignment[li] = vec
            if vec.shape != (self.d_ff,):
                raise ValueError(f"layer {li}: assignment length != d_ff")
            counts = np.bincount(vec, minlength=self.n_experts)
            if counts.size != self.n_experts or not (counts == size).all():
                raise ValueError(f"layer {li}: clusters are not balanced")

    def save(self, path) -> None:
        doc = {
            "version": 1,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "n_experts": self.n_experts,
            "seed": self.seed,
            "assignment": [vec.tolist() for vec in self.assignment],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ExpertPartition":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != 1:
            raise ValueError(f"{path}: unsupported partition version {doc.get('version')}")
        return cls(
            n_layers=doc["n_layers"],
            d_ff=doc["d_ff"],
            n_experts=doc["n_experts"],
            assignment=[np.asarray(v, dtype=np.int64) for v in doc["assignment"]],
            seed=doc["seed"],
        )

    def __eq__(self, other):
        if not isinstance(other, ExpertPartition):
            return NotImplemented
        return (
            (self.n_layers, self.d_ff, self.n_experts, self.seed)
            == (other.n_layers, other.d_ff, other.n_experts, other.seed)
            and all(np.array_equal(a, b) for a, b in zip(self.assignment, other.assignment))
        )


def _sq_dists(rows: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, E) squared euclidean distances
    diff = rows[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _init_centroids(rows: np.ndarray, k: int, init: str, rng: np.random.Generator) -> np.ndarray:
    n = rows.shape[0]
    if init == "random":
        idx = rng.choice(n, size=k, replace=False)
        return rows[np.sort(idx)].copy()
    # kmeans++: D^2-weighted seeding
    centroids = np.empty((k, rows.shape[1]), dtype=rows.dtype)
    first = int(rng.integers(n))
    centroids[0] = rows[first]
    d2 = np.einsum("nd,nd->n", rows - centroids[0], rows - centroids[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = rows[int(rng.integers(n))]
            continue
        probs = d2 / total
        nxt = int(rng.choice(n, p=probs))
        centroids[j] = rows[nxt]
        nd2 = np.einsum("nd,nd->n", rows - centroids[j], rows - centroids[j])
        d2 = np.minimum(d2, nd2)
    return centroids


def _balanced_assign(d2: np.ndarray, capacity: int) -> np.ndarray:
    """Greedy regret assignment: neurons ordered by (second-best - best)
    margin descending, each placed at its nearest centroid with remaining
    capacity. Ties everywhere break to the lowest index."""
    n, k = d2.shape
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    order_key = np.partition(d2, 1, axis=1)
    margin = order_key[:, 1] - order_key[:, 0] if k > 1 else np.zeros(n)
    # descending margin, ascending neuron index on ties
    order = np.lexsort((np.arange(n), -margin))
    remaining = np.full(k, capacity, dtype=np.int64)
    assign = np.empty(n, dtype=np.int64)
    pref = np.argsort(d2, axis=1, kind="stable")
    for i in order:
        for c in pref[i]:
            if remaining[c] > 0:
                assign[i] = c
                remaining[c] -= 1
                break
    return assign


def _wcss(rows: np.ndarray, assign: np.ndarray, k: int) -> float:
    total = 0.0
    for c in range(k):
        members = rows[assign == c]
        centroid = members.mean(axis=0)
        total += float(np.sum((members - centroid) ** 2))
    return total


def split_layer(up_proj_rows: np.ndarray, cfg: ClusterConfig,
                objective_history: Optional[list] = None) -> np.ndarray:
    """Balanced K-Means over one layer's up-projection rows.

    Returns an assignment vector of length d_ff with exactly d_ff/E members
    per expert. Iterations that would raise the within-cluster sum of squares
    are rejected, so the objective is non-increasing and the loop terminates.
    Pass a list as ``objective_history`` to collect the accepted WCSS values.
    """
    rows = np.asarray(up_proj_rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("up_proj_rows must be a 2-D matrix")
    if not np.isfinite(rows).all():
        raise ValueError("non-finite values in up-projection rows")
    n, k = rows.shape[0], cfg.n_experts
    if n % k != 0:
        raise ValueError(f"d_ff ({n}) not divisible by n_experts ({k})")
    capacity = n // k
    if capacity == 1:
        # E == d_ff: each neuron is its own expert; order by index.
        return np.arange(n, dtype=np.int64)

    rng = np.random.default_rng(cfg.seed)
    centroids = _init_centroids(rows, k, cfg.init, rng)
    assign = _balanced_assign(_sq_dists(rows, centroids), capacity)
    best_obj = _wcss(rows, assign, k)
    if objective_history is not None:
        objective_history.append(best_obj)
    for _ in range(cfg.max_iterations - 1):
        centroids = np.stack([rows[assign == c].mean(axis=0) for c in range(k)])
        new_assign = _balanced_assign(_sq_dists(rows, centroids), capacity)
        if np.array_equal(new_assign, assign):
            break
        new_obj = _wcss(rows, new_assign, k)
        if new_obj >= best_obj:
            break
        assign, best_obj = new_assign, new_obj
        if objective_history is not None:
            objective_history.append(best_obj)
    return assign


def split_model(model: ModelBundle, cfg: ClusterConfig) -> ExpertPartition:
    """Cluster every layer's up-projection rows; the per-layer assignment
    governs up, gate (same row) and down (same column) jointly."""
    d_ff = model.config.d_ff
    if d_ff % cfg.n_experts != 0:
        raise ValueError(f"d_ff ({d_ff}) not divisible by n_experts ({cfg.n_experts})")
    # same seed for every layer: identical layer weights produce identical
    # assignments, and layers stay independently recomputable
    assignment = [split_layer(lw.up_proj, cfg) for lw in model.layers]
    return ExpertPartition(
        n_layers=model.config.n_layers,
        d_ff=d_ff,
        n_experts=cfg.n_experts,
        assignment=assignment,
        seed=cfg.seed,
    )
