"""Pooling: mean vector, GMM Fisher vector, RNN Fisher vector, and the
normalization chain (FIM diagonal -> power -> L2)."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import rnn as _rnn
from .errors import DataError
from .numeric import as_matrix

log = logging.getLogger(__name__)

SOURCES = ("mean", "gmm-fv", "rnn-fv", "fused")
AGGREGATIONS = ("mean", "sum")
SCOPES = ("output-layer", "all-weights")
VARIANCE_FLOOR = 1e-6
FIM_FLOOR = 1e-12


@dataclass(frozen=True)
class FisherVector:
    values: np.ndarray
    source: str
    normalizations: tuple = ()
    aggregation: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("Fisher vector has non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "normalizations", tuple(self.normalizations))
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def degenerate(self) -> bool:
        return not np.any(self.values)


@dataclass(frozen=True)
class NormalizationConfig:
    power_alpha: float = 0.5
    apply_l2: bool = True
    apply_fim: bool = False

    def __post_init__(self):
        if not 0.0 <= self.power_alpha <= 1.0:
            raise ValueError("power_alpha must lie in [0, 1]")


# ---------------------------------------------------------------------------
# mean pooling


def mean_pool(seq) -> np.ndarray:
    vectors = seq.vectors if hasattr(seq, "vectors") else np.asarray(seq, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise DataError("mean_pool: empty sequence")
    return vectors.mean(axis=0)


# ---------------------------------------------------------------------------
# diagonal GMM


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    log_likelihood_history: tuple = ()

    def __post_init__(self):
        for name in ("weights", "means", "sigmas"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "log_likelihood_history", tuple(float(x) for x in self.log_likelihood_history))
        if self.means.shape != self.sigmas.shape or self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.sigmas <= 0):
            raise ValueError("standard deviations must be positive")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _component_log_density(X, means, sigmas):
    """log N(x_i; mu_k, diag(sigma_k^2)); shape (n, k)."""
    var = sigmas ** 2
    d = X.shape[1]
    diff = X[:, None, :] - means[None, :, :]
    sq = np.sum(diff ** 2 / var[None], axis=2)
    return -0.5 * sq - np.sum(np.log(sigmas), axis=1)[None, :] - 0.5 * d * np.log(2 * np.pi)


def _posteriors(X, params):
    w, mu, sigma = params
    logp = np.log(w)[None, :] + _component_log_density(X, mu, sigma)
    top = logp.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
    return np.exp(logp - lse[:, None]), lse


def gmm_log_likelihood(model: GmmModel, X) -> float:
    """Sum over rows of log p(x | model)."""
    X = as_matrix(X)
    _, lse = _posteriors(X, (model.weights, model.means, model.sigmas))
    return float(lse.sum())


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _kmeans(X, centers, iters):
    for _ in range(iters):
        dist = np.sum((X[:, None, :] - centers[None]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = X[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        centers = new
    dist = np.sum((X[:, None, :] - centers[None]) ** 2, axis=2)
    return centers, np.argmin(dist, axis=1)


def gmm_fit(vectors, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6,
            kmeans_iter: int = 10) -> GmmModel:
    """EM for a diagonal-covariance mixture, seeded by k-means++ and a few k-means rounds.

    Stops once the relative log-likelihood improvement drops below ``tol`` or
    after ``max_iter`` EM iterations. The per-iteration log-likelihood is kept
    in ``log_likelihood_history``.
    """
    X = as_matrix(vectors, "vectors")
    n, d = X.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples ({n})")
    rng = np.random.default_rng(seed)
    centers, assign = _kmeans(X, _kmeans_pp(X, k, rng), kmeans_iter)
    resp = np.zeros((n, k))
    resp[np.arange(n), assign] = 1.0
    tiny = 10 * np.finfo(np.float64).eps
    history = []
    params = None
    for it in range(max_iter + 1):
        # M-step
        nk = resp.sum(axis=0) + tiny
        w = nk / nk.sum()
        mu = resp.T @ X / nk[:, None]
        var = (resp.T @ (X ** 2)) / nk[:, None] - mu ** 2
        var = np.maximum(var, VARIANCE_FLOOR)
        params = (w, mu, np.sqrt(var))
        if it == max_iter:
            break
        # E-step
        resp, lse = _posteriors(X, params)
        ll = float(lse.sum())
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            break
    w, mu, sigma = params
    w = w / w.sum()
    return GmmModel(w, mu, sigma, history)


def gmm_fv(model: GmmModel, seq) -> FisherVector:
    """Gradient of sum_i log p(x_i) w.r.t. means then standard deviations (2*k*D values).

    No per-component scaling; normalization happens downstream.
    """
    X = seq.vectors if hasattr(seq, "vectors") else as_matrix(seq)
    if X.shape[0] == 0:
        raise DataError("gmm_fv: empty sequence")
    if X.shape[1] != model.dim:
        raise DataError(f"gmm_fv: dimension {X.shape[1]} does not match model dimension {model.dim}")
    gamma, _ = _posteriors(X, (model.weights, model.means, model.sigmas))
    s0 = gamma.sum(axis=0)[:, None]
    s1 = gamma.T @ X
    s2 = gamma.T @ (X ** 2)
    mu, sigma = model.means, model.sigmas
    d_mu = (s1 - mu * s0) / sigma ** 2
    centered_sq = s2 - 2 * mu * s1 + mu ** 2 * s0
    d_sigma = centered_sq / sigma ** 3 - s0 / sigma
    return FisherVector(np.concatenate([d_mu.ravel(), d_sigma.ravel()]), "gmm-fv")


# ---------------------------------------------------------------------------
# RNN Fisher vector


def scope_names(model: _rnn.RnnModel, scope: str) -> tuple:
    if scope == "output-layer":
        return _rnn.OUTPUT_LAYER
    if scope == "all-weights":
        return model.param_names
    raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")


def rnn_fv_dim(model: _rnn.RnnModel, scope: str = "output-layer") -> int:
    return sum(model.params[n].size for n in scope_names(model, scope))


def _output_layer_layout(grads: np.ndarray, model: _rnn.RnnModel) -> np.ndarray:
    # reorder [W.ravel(), b] into rows [W_r, b_r] so the output block reads as O x (H+1)
    o, h = model.params["out.weight"].shape
    w = grads[:, :o * h].reshape(-1, o, h)
    b = grads[:, o * h:].reshape(-1, o, 1)
    return np.concatenate([w, b], axis=2).reshape(grads.shape[0], -1)


def rnn_fv_matrix(model: _rnn.RnnModel, seqs: Sequence, aggregation: str = "mean",
                  scope: str = "output-layer") -> np.ndarray:
    """Raw RNN Fisher vectors of many sequences, one per row."""
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    names = scope_names(model, scope)
    seqs = list(seqs)
    G = _rnn.sequence_gradients(model, seqs, names)
    if scope == "output-layer":
        G = _output_layer_layout(G, model)
    if aggregation == "mean":
        G = G / np.array([len(s) for s in seqs], dtype=np.float64)[:, None]
    return G


def rnn_fv(model: _rnn.RnnModel, seq, aggregation: str = "mean", scope: str = "output-layer") -> FisherVector:
    """Gradient of the sequence NLL w.r.t. the selected weights, obtained by
    backpropagation at inference time; ``aggregation='mean'`` divides by N."""
    values = rnn_fv_matrix(model, [seq], aggregation, scope)[0]
    fv = FisherVector(values, "rnn-fv", aggregation=aggregation, meta={"scope": scope})
    if fv.degenerate:
        warnings.warn(f"sequence {getattr(seq, 'id', '')!r}: zero RNN Fisher vector", stacklevel=2)
    return fv


# ---------------------------------------------------------------------------
# coordinate subsampling


def subsample_indices(dim: int, count: int, seed: int) -> np.ndarray:
    if count > dim:
        raise ValueError(f"cannot sample {count} coordinates from {dim}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(dim, size=count, replace=False))


def subsample_coordinates(fv: FisherVector, count: int, seed: int) -> FisherVector:
    idx = subsample_indices(fv.dim, count, seed)
    meta = dict(fv.meta, subsample_seed=seed, subsample_count=count)
    return replace(fv, values=fv.values[idx], meta=meta)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class FimDiagonal:
    values: np.ndarray
    floor: float = FIM_FLOOR

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("FIM diagonal must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def fim_estimate(gradients, floor: float = FIM_FLOOR) -> FimDiagonal:
    """Mean of squared partials over training gradients (rows), floored."""
    rows = [g.values if isinstance(g, FisherVector) else g for g in gradients] \
        if not isinstance(gradients, np.ndarray) else gradients
    G = np.asarray(rows, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("fim_estimate needs a non-empty set of equal-length gradients")
    return FimDiagonal(np.maximum(np.mean(G ** 2, axis=0), floor), floor)


def fim_normalize(fv, fim: FimDiagonal):
    values = fv.values if isinstance(fv, FisherVector) else np.asarray(fv, dtype=np.float64)
    if values.shape[-1] != fim.values.shape[0]:
        raise ValueError(f"dimension mismatch: {values.shape[-1]} vs FIM {fim.values.shape[0]}")
    out = values / np.sqrt(fim.values)
    if isinstance(fv, FisherVector):
        return replace(fv, values=out, normalizations=fv.normalizations + ("fim",))
    return out


def power_normalize(v, alpha: float = 0.5) -> np.ndarray:
    """sign(z) |z|^alpha elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.abs(v) ** alpha


def l2_normalize(v) -> np.ndarray:
    """Scale to unit L2 norm along the last axis; zero vectors stay zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def normalize(fv: FisherVector, config: NormalizationConfig, fim: Optional[FimDiagonal] = None) -> FisherVector:
    """Apply the fixed chain fim? -> power -> l2 and record each step."""
    if config.apply_fim:
        if fim is None:
            raise ValueError("apply_fim requested but no FIM diagonal given")
        fv = fim_normalize(fv, fim)
    steps = list(fv.normalizations)
    values = power_normalize(fv.values, config.power_alpha)
    steps.append(f"power({config.power_alpha:g})")
    if config.apply_l2:
        values = l2_normalize(values)
        steps.append("l2")
    return replace(fv, values=values, normalizations=tuple(steps))


def concat_fuse(fvs: Sequence[FisherVector]) -> FisherVector:
    """Early fusion: concatenate already-normalized vectors in the given order."""
    fvs = list(fvs)
    if not fvs:
        raise ValueError("concat_fuse: empty list")
    if len(fvs) == 1:
        return fvs[0]
    parts = [{"source": f.source, "dim": f.dim, "normalizations": list(f.normalizations)} for f in fvs]
    return FisherVector(np.concatenate([f.values for f in fvs]), "fused", meta={"parts": parts})
