"""Attack-side instrumentation: 2-D PCA reduction of model populations,
cluster centroids, and the effectiveness / stealthiness metrics.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class PcaBasis:
    """Standardization parameters plus the top-2 principal axes."""

    mean: np.ndarray        # (d,)
    scale: np.ndarray       # (d,) ; zero-variance columns keep scale 1
    axes: np.ndarray        # (2, d) orthonormal rows, sign-fixed
    explained: np.ndarray   # (2,) top-2 eigenvalues of the covariance

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return ((X - self.mean) / self.scale) @ self.axes.T


@dataclass(frozen=True)
class Reduced2D:
    """2-D projections of a model population, with the basis that made them.

    client_ids / rounds are optional row metadata attached by callers that
    reduce federated upload traces.
    """

    coords: np.ndarray                       # (n, 2)
    basis: PcaBasis
    client_ids: Optional[np.ndarray] = None  # (n,)
    rounds: Optional[np.ndarray] = None      # (n,)


def pca_2d(models: np.ndarray) -> Reduced2D:
    """Standardize columns and project onto the top-2 principal axes.

    Columns are zero-meaned and scaled to unit (population) variance;
    zero-variance columns pass through with scale 1. Axes are eigenvectors
    of the (n-1)-normalized covariance, sign-fixed so each axis's
    largest-magnitude component is positive.
    """
    X = np.asarray(models, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("need at least 3 model rows")
    if X.shape[1] < 2:
        raise ValueError("need at least 2 columns")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    scale = np.where(std > 0.0, std, 1.0)
    Z = (X - mean) / scale
    # SVD of the standardized matrix: right singular vectors are the
    # covariance eigenvectors and s^2/(n-1) its eigenvalues; avoids ever
    # forming the d x d covariance for wide matrices
    _, s, vt = np.linalg.svd(Z, full_matrices=False)
    axes = vt[:2].copy()
    explained = (s[:2] ** 2) / (X.shape[0] - 1)
    if axes.shape[0] < 2:  # d == 2 guard; svd already yields 2 rows when d >= 2
        raise ValueError("could not extract 2 axes")
    for i in range(2):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    basis = PcaBasis(mean=mean, scale=scale, axes=axes, explained=explained)
    return Reduced2D(coords=Z @ axes.T, basis=basis)


def effectiveness(a_clean: float, a_poisoned: float) -> float:
    """Drop in global accuracy caused by the attack (may be negative)."""
    for v in (a_clean, a_poisoned):
        if not 0.0 <= v <= 1.0:
            raise ValueError("accuracies must lie in [0, 1]")
    return a_clean - a_poisoned


def stealthiness(benign_pts, poisoned_pts) -> float:
    """Reciprocal distance between the benign and poisoned cluster centroids.

    Coincident centroids return +inf.
    """
    b = np.asarray(benign_pts, dtype=np.float64)
    p = np.asarray(poisoned_pts, dtype=np.float64)
    if b.size == 0 or p.size == 0:
        raise ValueError("both point sets must be nonempty")
    d = float(np.linalg.norm(b.mean(axis=0) - p.mean(axis=0)))
    if d == 0.0:
        return float("inf")
    return 1.0 / d


def write_points_csv(path, reduced: Reduced2D, malicious_ids=frozenset()) -> None:
    """Dump (client, round, x, y, is_malicious) rows for scatter plotting."""
    ids = reduced.client_ids
    rounds = reduced.rounds
    if ids is None or rounds is None:
        raise ValueError("reduced points carry no client/round metadata")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "round", "x", "y", "is_malicious"])
        for cid, rnd, (x, y) in zip(ids, rounds, reduced.coords):
            w.writerow([int(cid), int(rnd), repr(float(x)), repr(float(y)),
                        int(int(cid) in malicious_ids)])
