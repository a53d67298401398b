"""Slow reference implementations used as test oracles."""
import numpy as np


def brute_force_dbscan(points, eps, min_samples):
    """Textbook DBSCAN with an O(n^2) distance matrix.

    Clusters are grown from core points in index order; a border point is
    claimed by the first cluster that reaches it. Cluster ids therefore
    follow the lowest-index core point of each cluster.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    nbr = d2 <= eps * eps
    core = nbr.sum(1) >= min_samples
    labels = np.full(n, -1)
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = cid
        stack = [i]
        while stack:
            p = stack.pop()
            for q in np.flatnonzero(nbr[p]):
                if labels[q] < 0:
                    labels[q] = cid
                    if core[q]:
                        stack.append(q)
        cid += 1
    return labels, core


def same_partition(a, b):
    """Labels equal up to a bijective relabelling of non-noise ids; noise must match exactly."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or not np.array_equal(a < 0, b < 0):
        return False
    fwd, bwd = {}, {}
    for x, y in zip(a[a >= 0], b[b >= 0]):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True
