"""Downstream heads and metrics: one-vs-all linear SVM, cosine ranking,
Recall@K / median / mean rank, and similarity fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numeric import as_matrix, cosine_similarity_matrix


@dataclass(frozen=True)
class LinearSvmModel:
    classes: tuple
    weights: np.ndarray
    bias: np.ndarray
    C: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape[0] != len(self.classes) or b.shape[0] != len(self.classes):
            raise ValueError("one weight vector and bias per class required")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite SVM weights")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def decision_values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: {X.shape[-1]} vs model {self.dim}")
        return X @ self.weights.T + self.bias


def svm_train(features, labels, C: float = 1.0, seed: int = 0, epochs: int = 100) -> LinearSvmModel:
    """One-vs-all linear SVMs trained with Pegasos stochastic subgradient steps.

    The objective per class is ``lam/2 ||w||^2 + mean(hinge)`` with
    ``lam = 1/(C n)``; the bias is learned as the weight of a constant
    feature. All classes share one seeded visiting order, so the result is
    identical to training them one at a time.
    """
    X = as_matrix(features, "features")
    y = np.asarray(labels)
    n = X.shape[0]
    if n == 0 or y.shape[0] != n:
        raise ValueError("features and labels must be non-empty and aligned")
    if C <= 0:
        raise ValueError("C must be > 0")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("svm_train needs at least 2 classes")
    Xa = np.hstack([X, np.ones((n, 1))])
    Y = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    lam = 1.0 / (C * n)
    radius = 1.0 / np.sqrt(lam)
    W = np.zeros((classes.size, Xa.shape[1]))
    rng = np.random.default_rng(seed)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            x, yi = Xa[i], Y[i]
            active = yi * (W @ x) < 1.0
            W *= 1.0 - eta * lam
            if active.any():
                W[active] += eta * yi[active, None] * x[None, :]
            norms = np.linalg.norm(W, axis=1)
            over = norms > radius
            if over.any():
                W[over] *= (radius / norms[over])[:, None]
    return LinearSvmModel(tuple(classes.tolist()), W[:, :-1], W[:, -1], C)


def svm_predict(model: LinearSvmModel, v):
    """Class with the largest decision value; ties go to the smallest class id."""
    scores = model.decision_values(v)
    idx = np.argmax(scores, axis=-1)
    classes = np.asarray(model.classes)
    return int(classes[idx]) if np.ndim(idx) == 0 else classes[idx]


def classify_accuracy(model: LinearSvmModel, features, labels) -> float:
    X = as_matrix(features, "features")
    y = np.asarray(labels)
    if X.shape[0] == 0:
        raise ValueError("empty test set")
    return float(np.mean(svm_predict(model, X) == y))


# ---------------------------------------------------------------------------
# retrieval


@dataclass(frozen=True)
class RetrievalMetrics:
    recall_at: dict
    median_rank: float
    mean_rank: float

    def to_dict(self) -> dict:
        return {
            "recall": {str(k): float(v) for k, v in sorted(self.recall_at.items())},
            "median_rank": float(self.median_rank),
            "mean_rank": float(self.mean_rank),
        }


def rank_similarity(sim) -> np.ndarray:
    """Gallery indices per query row, by descending similarity, ties by ascending index."""
    sim = np.asarray(sim, dtype=np.float64)
    return np.argsort(-sim, axis=1, kind="stable")


def rank_matrix(queries, gallery) -> np.ndarray:
    return rank_similarity(cosine_similarity_matrix(queries, gallery))


def first_hit_ranks(rankings, ground_truth: Sequence) -> np.ndarray:
    """1-based rank of the best-placed ground-truth item for every query."""
    rankings = np.asarray(rankings)
    if len(ground_truth) != rankings.shape[0]:
        raise ValueError("one ground-truth set per query required")
    ranks = np.empty(rankings.shape[0], dtype=np.int64)
    for q, truth in enumerate(ground_truth):
        truth = np.fromiter(truth, dtype=np.int64) if not isinstance(truth, np.ndarray) else truth
        if truth.size == 0:
            raise ValueError(f"query {q} has no ground-truth item")
        hits = np.flatnonzero(np.isin(rankings[q], truth))
        if hits.size == 0:
            raise ValueError(f"query {q}: ground truth not present in the ranking")
        ranks[q] = hits[0] + 1
    return ranks


def retrieval_metrics(rankings, ground_truth: Sequence, ks=(1, 5, 10)) -> RetrievalMetrics:
    ranks = first_hit_ranks(rankings, ground_truth)
    recall = {int(k): float(np.mean(ranks <= k)) for k in ks}
    return RetrievalMetrics(recall, float(np.median(ranks)), float(np.mean(ranks)))


def similarity_fuse(matrices: Sequence, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """(Weighted) elementwise mean of equally shaped similarity matrices."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        raise ValueError("nothing to fuse")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ValueError("similarity matrices must share one shape")
    if len(mats) == 1:
        return mats[0]
    w = np.ones(len(mats)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(mats),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("need one non-negative weight per matrix")
    w = w / w.sum()
    if np.all(w == w[0]):
        return np.mean(np.stack(mats), axis=0)
    return np.tensordot(w, np.stack(mats), axes=1)


def format_metrics_table(rows: dict, ks=(1, 5, 10)) -> str:
    """Aligned plain-text table: one row per (name -> RetrievalMetrics)."""
    header = ["Method"] + [f"R@{k}" for k in ks] + ["med r", "mean r"]
    body = []
    for name, m in rows.items():
        body.append([name] + [f"{100 * m.recall_at[k]:.1f}" for k in ks]
                    + [f"{m.median_rank:g}", f"{m.mean_rank:.1f}"])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines)
