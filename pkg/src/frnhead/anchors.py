"""k-means anchor shapes under the ``1 - IoU`` distance of co-centred boxes."""
from __future__ import annotations

import numpy as np


def shape_iou(shapes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of every (w, h) in ``shapes`` against every centroid, both boxes
    sharing one centre.  Returns an (n, k) matrix."""
    w = np.minimum(shapes[:, None, 0], centroids[None, :, 0])
    h = np.minimum(shapes[:, None, 1], centroids[None, :, 1])
    inter = w * h
    area_s = (shapes[:, 0] * shapes[:, 1])[:, None]
    area_c = (centroids[:, 0] * centroids[:, 1])[None, :]
    return inter / (area_s + area_c - inter)


def shape_distance(shapes, centroids):
    return 1.0 - shape_iou(np.asarray(shapes, float), np.asarray(centroids, float))


def _seed_plus_plus(x, k, rng):
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d = shape_distance(x, np.array(centroids)).min(axis=1)
        total = d.sum()
        if total <= 0:
            # every point already sits on a centroid
            centroids.append(x[rng.integers(len(x))])
            continue
        centroids.append(x[rng.choice(len(x), p=d / total)])
    return np.array(centroids)


def _assign(x, centroids):
    d = shape_distance(x, centroids)
    a = d.argmin(axis=1)
    return a, float(d[np.arange(len(x)), a].mean())


def _lloyd(x, centroids, max_iters):
    """Lloyd iterations with mean-width/height updates.

    The mean does not minimize ``1 - IoU`` exactly, so an update can raise the
    objective; such an update is rejected and iteration stops there.
    """
    assign, dist = _assign(x, centroids)
    history = [dist]
    for _ in range(max_iters):
        new = centroids.copy()
        for j in range(len(new)):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        new_assign, new_dist = _assign(x, new)
        if new_dist > dist:
            break
        centroids = new
        converged = np.array_equal(new_assign, assign) and new_dist == dist
        assign, dist = new_assign, new_dist
        history.append(dist)
        if converged:
            break
    return centroids, dist, history


def kmeans_anchors(shapes, k: int = 5, max_iters: int = 300, seed: int = 0, n_init: int = 30):
    """Cluster box shapes into ``k`` anchors.

    k-means++ seeding under the IoU distance, Lloyd updates with the mean
    width/height of each cluster; the best of ``n_init`` seeded restarts is
    kept.  Returns ``(centroids sorted by area, mean_distance)``.
    """
    x = np.asarray(shapes, dtype=np.float64).reshape(-1, 2)
    if len(x) == 0:
        raise ValueError("no shapes to cluster")
    if k < 1 or k > len(x):
        raise ValueError(f"k={k} must be in [1, {len(x)}]")
    if np.any(x <= 0):
        raise ValueError("box shapes must have positive width and height")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        cents, dist, _ = _lloyd(x, _seed_plus_plus(x, k, rng), max_iters)
        if best is None or dist < best[1]:
            best = (cents, dist)
    cents, dist = best
    order = np.argsort(cents[:, 0] * cents[:, 1], kind="stable")
    return cents[order], dist


def lloyd_history(shapes, k: int, max_iters: int = 300, seed: int = 0):
    """Per-iteration mean distance of a single seeded run (diagnostics)."""
    x = np.asarray(shapes, dtype=np.float64).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    return _lloyd(x, _seed_plus_plus(x, k, rng), max_iters)[2]
