"""Small k-means with k-means++ seeding, shared by the mixture initializers
and the motif-topic context clustering."""
from __future__ import annotations

import numpy as np


def _sq_dist(X, C):
    return np.maximum((X ** 2).sum(1)[:, None] + (C ** 2).sum(1)[None, :] - 2 * X @ C.T, 0.0)


def kmeanspp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dist(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dist(X, X[idx][None, :])[:, 0])
    return np.array(centers, dtype=float)


def lloyd(X, centers, max_iter=100):
    centers = centers.copy()
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dist(X, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    inertia = float(_sq_dist(X, centers)[np.arange(len(X)), labels].sum())
    return centers, labels, inertia


def kmeans(X, k, rng, n_init=1, max_iter=100):
    """Best-of-``n_init`` k-means; returns ``(centers, labels)``."""
    X = np.asarray(X, dtype=float)
    best = None
    for _ in range(n_init):
        out = lloyd(X, kmeanspp(X, k, rng), max_iter)
        if best is None or out[2] < best[2]:
            best = out
    return best[0], best[1]
