"""Seeded synthetic datasets with known helpful transformations."""

from __future__ import annotations

import numpy as np

from .table import CLASSIFICATION, REGRESSION, Dataset


def ratio_dataset(rows: int = 500, features: int = 5, noise: float = 0.01, seed: int = 0) -> Dataset:
    """Regression target ``x1 / x2 + noise``; the other columns are distractors.

    ``x2`` spans a wide positive range so the ratio is far from linear in the
    raw columns, while a single divide combination recovers it exactly.
    """
    if features < 2:
        raise ValueError("need at least 2 features")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(rows, features))
    X[:, 0] = rng.uniform(1.0, 10.0, rows)
    X[:, 1] = rng.uniform(0.2, 5.0, rows)
    y = X[:, 0] / X[:, 1] + rng.normal(0.0, noise, rows)
    return Dataset("ratio", tuple(f"x{i + 1}" for i in range(features)), X, y, REGRESSION)


def blob_dataset(rows: int = 200, separation: float = 4.0, margin: float = 2.0, seed: int = 0) -> Dataset:
    """Two unit-variance Gaussian blobs in 2-D, ``separation`` std apart.

    Points closer than ``margin / 2`` to the bisecting line (or on the wrong
    side of it) are redrawn, so the classes are linearly separable with a gap
    of at least ``margin`` standard deviations.
    """
    if margin >= separation:
        raise ValueError("margin must be smaller than separation")
    rng = np.random.default_rng(seed)
    axis = np.array([1.0, 1.0]) / np.sqrt(2.0)
    half = rows // 2

    def draw(n: int, sign: float) -> np.ndarray:
        centre = sign * separation / 2 * axis
        out = np.empty((0, 2))
        while len(out) < n:
            pts = rng.normal(centre, 1.0, (2 * n, 2))
            out = np.vstack([out, pts[sign * (pts @ axis) >= margin / 2]])
        return out[:n]

    X = np.vstack([draw(half, -1.0), draw(rows - half, 1.0)])
    y = np.array([0] * half + [1] * (rows - half))
    return Dataset("blobs", ("a", "b"), X, y, CLASSIFICATION)
