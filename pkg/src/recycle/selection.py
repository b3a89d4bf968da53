"""Transferability ranking of pooled models by k-NN validation accuracy.

Each candidate model embeds the target task's train and validation splits
into its own feature space; the fraction of validation points whose k
nearest training neighbors vote for the right label scores the model. No
gradients, no training: brute-force neighbor search with deterministic
tie handling (neighbors by (distance, row index), votes by smallest label,
model ranking ties by smallest model id).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sources import Backbone, FeatureDataset, Pool, SourceModelRecord, extract_features
from .tasks import TaskSpec


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 5
    m: int = 1
    distance: str = "euclidean"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.distance != "euclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")


@dataclass
class SelectionReport:
    """Per-model scores ranked non-increasing, plus the tie-break record."""

    k: int
    m: int
    scores: list[tuple[str, float]]
    selected: list[str]
    ties: list[list[str]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "m": self.m,
            "scores": [{"model_id": mid, "knn_acc": acc} for mid, acc in self.scores],
            "selected": list(self.selected),
            "ties": [list(group) for group in self.ties],
        }


def euclidean_dist(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return float(np.sqrt(np.sum((u - v) ** 2)))


def _dists_to(queries: np.ndarray, train: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Exact Euclidean distances, queries x train, via direct differences."""
    q = queries.astype(np.float64, copy=False)
    t = train.astype(np.float64, copy=False)
    out = np.empty((q.shape[0], t.shape[0]))
    for start in range(0, q.shape[0], chunk):
        block = q[start:start + chunk]
        out[start:start + chunk] = np.sqrt(
            ((block[:, None, :] - t[None, :, :]) ** 2).sum(axis=-1))
    return out


def _vote(labels: np.ndarray) -> int:
    counts = np.bincount(labels)
    return int(counts.argmax())   # argmax takes the smallest label on ties


def knn_predict(train: FeatureDataset, query, k: int) -> int:
    """Majority label among the k nearest training rows.

    Nearest means smallest (distance, row index) pair; vote ties go to the
    smallest label id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = train.features.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} training rows")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != train.dim:
        raise ValueError(f"dimension mismatch: query {query.shape[0]} vs train {train.dim}")
    dists = _dists_to(query[None, :], train.features)[0]
    order = np.argsort(dists, kind="stable")
    return _vote(train.labels[order[:k]])


def knn_accuracy_features(train: FeatureDataset, val: FeatureDataset, k: int) -> float:
    """Fraction of validation rows classified correctly in this feature space."""
    if train.features.shape[0] == 0 or val.features.shape[0] == 0:
        raise ValueError("empty feature split")
    if k > train.features.shape[0]:
        raise ValueError(f"k={k} exceeds the {train.features.shape[0]} training rows")
    if train.dim != val.dim:
        raise ValueError(f"dimension mismatch: train {train.dim} vs val {val.dim}")
    dists = _dists_to(val.features, train.features)
    order = np.argsort(dists, axis=1, kind="stable")[:, :k]
    predictions = np.array([_vote(train.labels[row]) for row in order])
    return float((predictions == val.labels).mean())


def knn_accuracy(model: SourceModelRecord, backbone: Backbone, task: TaskSpec,
                 k: int = 5) -> float:
    """Validation k-NN accuracy of the target task in one model's feature space."""
    train = extract_features(model, backbone, task, "train")
    val = extract_features(model, backbone, task, "val")
    return knn_accuracy_features(train, val, k)


def select_top_m(pool: Pool, target: TaskSpec, cfg: SelectionConfig) -> SelectionReport:
    """Score every pooled model on the target task and keep the top m."""
    if not pool.records:
        raise ValueError("pool is empty")
    if cfg.m > len(pool.records):
        raise ValueError(f"m={cfg.m} exceeds pool size {len(pool.records)}")
    scored = [(r.model_id, knn_accuracy(r, pool.backbone, target, cfg.k))
              for r in pool.records]
    scored.sort(key=lambda item: (-item[1], item[0]))
    ties = []
    i = 0
    while i < len(scored):
        j = i
        while j + 1 < len(scored) and scored[j + 1][1] == scored[i][1]:
            j += 1
        if j > i:
            ties.append([mid for mid, _ in scored[i:j + 1]])
        i = j + 1
    return SelectionReport(k=cfg.k, m=cfg.m, scores=scored,
                           selected=[mid for mid, _ in scored[:cfg.m]], ties=ties)
