"""Synthetic benchmarks.

``generate_order_task`` builds a binary problem where both classes share the
same per-sequence multiset of vectors and differ only in element order, so
any order-invariant pooling carries no class information. The planted-latent
generators produce paired views with a known shared signal for CCA and
retrieval checks.
"""

from __future__ import annotations

import numpy as np

from .io import SequenceDataset
from .rnn import FeatureSequence

ORDER_LABELS = ["ascending", "descending"]


def _order_split(rng, n, dim, length, prefix):
    records = []
    for pair in range(n // 2):
        vectors = rng.standard_normal((length, dim))
        ascending = vectors[np.argsort(vectors[:, 0], kind="stable")]
        group = f"{prefix}-{pair:06d}"
        records.append(FeatureSequence(ascending, 0, f"{group}-a", group))
        records.append(FeatureSequence(ascending[::-1], 1, f"{group}-b", group))
    return SequenceDataset(records, dim, labels=list(ORDER_LABELS))


def generate_order_task(n_train: int, n_test: int, dim: int, length: int, seed: int):
    """Return ``(train, test)`` datasets of twin sequences.

    Class 0 lists each sequence's vectors sorted by their first coordinate,
    class 1 lists the very same vectors in reverse. Twins share a ``group``
    so validation splits never separate them.
    """
    if length < 2:
        raise ValueError("sequence length must be >= 2")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    for name, n in (("n_train", n_train), ("n_test", n_test)):
        if n < 2 or n % 2:
            raise ValueError(f"{name} must be a positive even count (twin pairs), got {n}")
    rng = np.random.default_rng(seed)
    train = _order_split(rng, n_train, dim, length, "train")
    test = _order_split(rng, n_test, dim, length, "test")
    return train, test


def planted_latent_pairs(n: int, dx: int, dy: int, seed: int, signal: float = 1.0,
                         noise_x: float = 0.5, noise_y: float = 0.5):
    """Two views sharing one scalar latent ``z ~ N(0, 1)``.

    ``x = z a + noise_x * e_x`` and ``y = z b + noise_y * e_y`` with random
    directions ``a``, ``b`` of norm ``signal``. Returns ``(X, Y, rho)`` where
    ``rho`` is the population top canonical correlation.
    """
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(dx)
    b = rng.standard_normal(dy)
    a *= signal / np.linalg.norm(a)
    b *= signal / np.linalg.norm(b)
    z = rng.standard_normal(n)
    X = np.outer(z, a) + noise_x * rng.standard_normal((n, dx))
    Y = np.outer(z, b) + noise_y * rng.standard_normal((n, dy))
    return X, Y, planted_correlation(signal ** 2, noise_x ** 2, signal ** 2, noise_y ** 2)


def planted_correlation(signal_x: float, noise_var_x: float, signal_y: float, noise_var_y: float) -> float:
    """corr(a.x, b.y) at the optimum: the product of each view's
    signal/(signal+noise) factor, square-rooted (unit-variance latent)."""
    return float(np.sqrt(signal_x / (signal_x + noise_var_x)) * np.sqrt(signal_y / (signal_y + noise_var_y)))


def generate_retrieval_task(n_train: int, n_valid: int, n_test: int, seed: int, dx: int = 20, dy: int = 20,
                            latent_dim: int = 8, per_image: int = 5, length: int = 6, noise: float = 0.5):
    """Paired "image" vectors and "sentence" sequences sharing a latent code.

    Each image ``i`` has latent ``z_i``; its vector is ``A z_i + noise`` and
    each of its ``per_image`` sentences is a sequence whose elements are
    ``B z_i + noise``. Sentence records carry ``group`` = image id. Returns
    ``{"train": (x, y), "valid": (x, y), "test": (x, y)}``.
    """
    if min(n_train, n_valid, n_test) < 1 or per_image < 1 or length < 1:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((latent_dim, dx)) / np.sqrt(latent_dim)
    B = rng.standard_normal((latent_dim, dy)) / np.sqrt(latent_dim)
    splits = {}
    for name, n in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        xs, ys = [], []
        for i in range(n):
            z = rng.standard_normal(latent_dim)
            img = f"{name}-img{i:05d}"
            xs.append(FeatureSequence((z @ A + noise * rng.standard_normal(dx))[None, :], None, img, img))
            for s in range(per_image):
                vec = z @ B + noise * rng.standard_normal((length, dy))
                ys.append(FeatureSequence(vec, None, f"{img}-s{s}", img))
        splits[name] = (SequenceDataset(xs, dx), SequenceDataset(ys, dy))
    return splits
