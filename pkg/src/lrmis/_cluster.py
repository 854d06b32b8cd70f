"""Seeded weighted k-means (kmeans++ init, Lloyd iterations).

Shared by EM initialization and the statistically-different-bins metric.
Deterministic for a fixed Generator; empty clusters are reseeded at the
point with the largest weighted distance to its centroid.
"""

import numpy as np
from scipy.spatial.distance import cdist


def kmeans_plusplus(points, k, rng, weights=None):
    """kmeans++ seeding; the first seed is drawn with probability ~ weight."""
    n = points.shape[0]
    if k > n:
        raise ValueError(f"cannot seed {k} clusters from {n} points")
    if weights is None:
        weights = np.ones(n)
    p = weights / weights.sum()
    centers = np.empty((k, points.shape[1]))
    idx = rng.choice(n, p=p)
    centers[0] = points[idx]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        scores = weights * d2
        total = scores.sum()
        if total <= 0:
            idx = rng.choice(n, p=p)
        else:
            idx = rng.choice(n, p=scores / total)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def lloyd(points, centers, n_iters, weights=None):
    """Weighted Lloyd iterations; returns (centers, assignment)."""
    n = points.shape[0]
    k = centers.shape[0]
    if weights is None:
        weights = np.ones(n)
    assign = None
    for _ in range(n_iters):
        dist = cdist(points, centers, metric="sqeuclidean")
        assign = np.argmin(dist, axis=1)
        for j in range(k):
            mask = assign == j
            mass = weights[mask].sum()
            if mass > 0:
                centers[j] = weights[mask] @ points[mask] / mass
            else:
                # reseed at the worst-covered point
                worst = np.argmax(weights * dist[np.arange(n), assign])
                centers[j] = points[worst]
                assign[worst] = j
    dist = cdist(points, centers, metric="sqeuclidean")
    assign = np.argmin(dist, axis=1)
    return centers, assign


def kmeans(points, k, rng, n_iters, weights=None):
    centers = kmeans_plusplus(points, k, rng, weights=weights)
    return lloyd(points, centers, n_iters, weights=weights)
