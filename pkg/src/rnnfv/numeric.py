"""Dense linear algebra helpers: PCA, regularized CCA and cosine similarity.

All arithmetic is float64. Samples are stored one per *row*.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

RANK_TOL = 1e-10


def as_matrix(samples, name="samples") -> np.ndarray:
    """Return ``samples`` as a finite 2-D float64 array."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _fix_signs(rows: np.ndarray) -> np.ndarray:
    # make the largest-magnitude entry of each row positive so fits are reproducible
    idx = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(rows.shape[0]), idx])
    signs[signs == 0] = 1.0
    return rows * signs[:, np.newaxis]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "components", _frozen(self.components))
        object.__setattr__(self, "explained_variance", _frozen(self.explained_variance))
        if self.components.shape[1] != self.mean.shape[0]:
            raise ValueError("components and mean disagree on input dimension")

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(samples, target_dim: int) -> PcaModel:
    """Fit PCA through an SVD of the centered sample matrix.

    ``target_dim`` is clamped to ``min(n - 1, D)`` with a warning. Directions
    beyond the numerical rank are kept but their explained variance is
    reported as exactly zero.
    """
    X = as_matrix(samples)
    n, d = X.shape
    if n < 2:
        raise ValueError("pca_fit needs at least 2 samples")
    if target_dim < 1:
        raise ValueError("target_dim must be >= 1")
    k = min(target_dim, n - 1, d)
    if k < target_dim:
        warnings.warn(f"PCA dimension clamped from {target_dim} to {k}", stacklevel=2)
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank = int(np.sum(s > RANK_TOL * s[0])) if s[0] > 0 else 0
    if rank < k:
        warnings.warn(f"PCA: numerical rank {rank} is below requested dimension {k}", stacklevel=2)
    var = s[:k] ** 2 / (n - 1)
    var[rank:] = 0.0
    return PcaModel(mean=mean, components=_fix_signs(vt[:k]), explained_variance=var)


def pca_transform(model: PcaModel, v) -> np.ndarray:
    """Project a vector (or rows of a matrix) onto the principal directions."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.input_dim:
        raise ValueError(f"expected dimension {model.input_dim}, got {v.shape[-1]}")
    return (v - model.mean) @ model.components.T


def pca_inverse_transform(model: PcaModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.output_dim:
        raise ValueError(f"expected dimension {model.output_dim}, got {z.shape[-1]}")
    return z @ model.components + model.mean


@dataclass(frozen=True)
class CcaModel:
    projection_x: np.ndarray
    projection_y: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray
    correlations: np.ndarray
    regularization: float

    def __post_init__(self):
        for name in ("projection_x", "projection_y", "mean_x", "mean_y", "correlations"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "regularization", float(self.regularization))

    @property
    def dim(self) -> int:
        return self.correlations.shape[0]


def _inv_sqrt(cov: np.ndarray) -> tuple[np.ndarray, int]:
    evals, evecs = np.linalg.eigh(cov)
    top = evals.max() if evals.size else 0.0
    keep = evals > RANK_TOL * top if top > 0 else np.zeros_like(evals, dtype=bool)
    scale = np.zeros_like(evals)
    scale[keep] = 1.0 / np.sqrt(evals[keep])
    return (evecs * scale) @ evecs.T, int(keep.sum())


def cca_fit(pairs_x, pairs_y, target_dim: int, lam: float = 0.0) -> CcaModel:
    """Regularized CCA.

    Each view is whitened with ``(C + lam*I)^(-1/2)`` and the whitened
    cross-covariance is decomposed with an SVD. Canonical directions are
    rescaled so every projected training dimension has unit variance.
    """
    X = as_matrix(pairs_x, "pairs_x")
    Y = as_matrix(pairs_y, "pairs_y")
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ValueError(f"pair count mismatch: {n} x-vectors vs {Y.shape[0]} y-vectors")
    if n < 2:
        raise ValueError("cca_fit needs at least 2 pairs")
    if lam < 0:
        raise ValueError("regularization must be non-negative")
    if target_dim < 1:
        raise ValueError("target_dim must be >= 1")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    cxx = Xc.T @ Xc / (n - 1) + lam * np.eye(X.shape[1])
    cyy = Yc.T @ Yc / (n - 1) + lam * np.eye(Y.shape[1])
    cxy = Xc.T @ Yc / (n - 1)
    wx, rx = _inv_sqrt(cxx)
    wy, ry = _inv_sqrt(cyy)
    u, s, vt = np.linalg.svd(wx @ cxy @ wy, full_matrices=False)
    k = min(target_dim, rx, ry)
    if k < 1:
        raise ValueError("CCA: one of the views has zero variance")
    if k < target_dim:
        warnings.warn(f"CCA dimension clamped from {target_dim} to {k}", stacklevel=2)
    px = wx @ u[:, :k]
    py = wy @ vt[:k].T
    sx = np.sqrt(np.sum((Xc @ px) ** 2, axis=0) / (n - 1))
    sy = np.sqrt(np.sum((Yc @ py) ** 2, axis=0) / (n - 1))
    sx[sx == 0] = 1.0
    sy[sy == 0] = 1.0
    return CcaModel(projection_x=px / sx, projection_y=py / sy, mean_x=mx, mean_y=my,
                    correlations=s[:k], regularization=lam)


def cca_transform(model: CcaModel, v, side: str) -> np.ndarray:
    """Map a vector (or rows of a matrix) from view ``side`` ('x' or 'y') into the shared space."""
    if side == "x":
        proj, mean = model.projection_x, model.mean_x
    elif side == "y":
        proj, mean = model.projection_y, model.mean_y
    else:
        raise ValueError(f"side must be 'x' or 'y', got {side!r}")
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != mean.shape[0]:
        raise ValueError(f"expected dimension {mean.shape[0]} for side {side}, got {v.shape[-1]}")
    return (v - mean) @ proj


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_similarity_matrix(queries, gallery) -> np.ndarray:
    """Pairwise cosine similarities between the rows of two matrices."""
    Q = as_matrix(queries, "queries")
    G = as_matrix(gallery, "gallery")
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"dimension mismatch {Q.shape[1]} vs {G.shape[1]}")
    nq = np.linalg.norm(Q, axis=1)
    ng = np.linalg.norm(G, axis=1)
    if np.any(nq == 0) or np.any(ng == 0):
        raise ValueError("zero vector present")
    return (Q / nq[:, None]) @ (G / ng[:, None]).T


def cca_grid_search(train_x, train_y, valid_x, valid_y, target_dim, lambdas, score):
    """Fit one CCA per candidate regularization and keep the best.

    ``score(model, valid_x, valid_y)`` must return a number where larger is
    better; ties go to the first candidate. Returns ``(model, scores)``.
    """
    if not lambdas:
        raise ValueError("empty regularization grid")
    best, scores = None, []
    for lam in lambdas:
        model = cca_fit(train_x, train_y, target_dim, lam)
        value = float(score(model, valid_x, valid_y))
        scores.append(value)
        if best is None or value > max(scores[:-1]):
            best = model
    return best, scores
