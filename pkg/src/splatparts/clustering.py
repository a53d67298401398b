"""Density-based refinement of bottleneck channels into spatial parts.

DBSCAN conventions used throughout: a point's eps-neighbourhood is closed
(distance <= eps) and includes the point itself; a border point reachable
from several clusters joins the one created first, clusters being created in
order of their lowest-index core point.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .avatar import Avatar, to_global_space

NOISE = -1


@dataclass(frozen=True)
class DbscanConfig:
    eps: float = 0.005
    min_samples: int = 100

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.min_samples < 1:
            raise ValueError("min_samples must be at least 1")


@dataclass
class Segmentation:
    """Per-Gaussian channel and cluster id (``NOISE`` for filtered points)."""

    channel: np.ndarray
    cluster: np.ndarray
    avatar_id: str = ""

    def __post_init__(self):
        self.channel = np.asarray(self.channel, dtype=np.int64)
        self.cluster = np.asarray(self.cluster, dtype=np.int64)
        if self.channel.shape != self.cluster.shape:
            raise ValueError("channel and cluster arrays differ in length")

    def __len__(self):
        return len(self.channel)

    @property
    def noise(self) -> np.ndarray:
        return self.cluster == NOISE

    def members(self, channel: int, cluster: int | None = None) -> np.ndarray:
        sel = self.channel == channel
        if cluster is not None:
            sel &= self.cluster == cluster
        return np.flatnonzero(sel)

    def n_clusters(self, channel: int) -> int:
        c = self.cluster[(self.channel == channel) & ~self.noise]
        return int(c.max()) + 1 if len(c) else 0

    def flat_labels(self) -> np.ndarray:
        """One id per (channel, cluster) pair; noise stays ``NOISE``."""
        out = np.full(len(self), NOISE, dtype=np.int64)
        keep = ~self.noise
        pairs = np.stack([self.channel[keep], self.cluster[keep]], axis=1)
        if len(pairs):
            _, inv = np.unique(pairs, axis=0, return_inverse=True)
            out[keep] = inv.reshape(-1)
        return out


def dbscan(points, config: DbscanConfig) -> np.ndarray:
    """Cluster label per point (``NOISE`` = -1); kd-tree neighbour search."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point coordinates")
    pairs = cKDTree(pts).query_pairs(config.eps, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    counts = 1 + np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    core = counts >= config.min_samples
    if not core.any():
        return labels

    cc = core[i] & core[j]
    graph = sparse.coo_matrix((np.ones(int(cc.sum())), (i[cc], j[cc])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    # number components in order of their lowest-index core point
    core_idx = np.flatnonzero(core)
    uniq, first, inv = np.unique(comp[core_idx], return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(uniq))
    labels[core_idx] = rank[inv.reshape(-1)]

    # border points: smallest cluster id among adjacent core points
    border = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    for a, b in ((i, j), (j, i)):
        m = core[a] & ~core[b]
        np.minimum.at(border, b[m], labels[a[m]])
    is_border = ~core & (border != np.iinfo(np.int64).max)
    labels[is_border] = border[is_border]
    return labels


def refine_segments(avatar: Avatar, channel_labels, configs=None) -> Segmentation:
    """Run DBSCAN separately inside every channel, on global positions.

    ``configs`` is a single :class:`DbscanConfig` or a mapping from channel
    to config (missing channels use the default config).
    """
    labels = np.asarray(channel_labels, dtype=np.int64)
    if len(labels) != len(avatar):
        raise ValueError(f"{len(labels)} labels for {len(avatar)} Gaussians")
    mu = to_global_space(avatar).gaussians.mu
    cluster = np.full(len(labels), NOISE, dtype=np.int64)
    for ch in np.unique(labels):
        if isinstance(configs, dict):
            cfg = configs.get(int(ch), DbscanConfig())
        else:
            cfg = configs or DbscanConfig()
        members = np.flatnonzero(labels == ch)
        cluster[members] = dbscan(mu[members], cfg)
    return Segmentation(labels, cluster, avatar.name)


def _with_singleton_noise(labels: np.ndarray) -> np.ndarray:
    labels = labels.copy()
    noise = labels < 0
    base = labels.max() + 1 if (~noise).any() else 0
    labels[noise] = base + np.arange(int(noise.sum()))
    return labels


def segmentation_metrics(predicted, truth):
    """``(ARI, NMI, purity)`` of a segmentation against ground-truth labels.

    Noise points count as singleton clusters for ARI/NMI and are left out of
    purity.
    """
    from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

    pred = predicted.flat_labels() if isinstance(predicted, Segmentation) else np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predicted vs {len(truth)} truth labels")
    full = _with_singleton_noise(pred)
    with warnings.catch_warnings():
        # many singleton noise classes trip sklearn's "looks like regression" heuristic
        warnings.filterwarnings("ignore", message="The number of unique classes", category=UserWarning)
        ari = float(adjusted_rand_score(truth, full))
        nmi = float(normalized_mutual_info_score(truth, full))
    keep = pred >= 0
    if not keep.any():
        return ari, nmi, 0.0
    _, p_inv = np.unique(pred[keep], return_inverse=True)
    _, t_inv = np.unique(truth[keep], return_inverse=True)
    table = np.zeros((p_inv.max() + 1, t_inv.max() + 1), dtype=np.int64)
    np.add.at(table, (p_inv, t_inv), 1)
    purity = float(table.max(axis=1).sum() / keep.sum())
    return ari, nmi, purity


def sweep(avatar: Avatar, channel_labels, eps_values, min_samples_values):
    """Cluster-count / noise-fraction table over a DBSCAN parameter grid."""
    labels = np.asarray(channel_labels, dtype=np.int64)
    mu = to_global_space(avatar).gaussians.mu
    rows = []
    for ch in np.unique(labels):
        pts = mu[labels == ch]
        for eps in eps_values:
            for ms in min_samples_values:
                lab = dbscan(pts, DbscanConfig(float(eps), int(ms)))
                rows.append({
                    "channel": int(ch), "eps": float(eps), "min_samples": int(ms), "members": len(pts),
                    "clusters": int(lab.max()) + 1 if (lab >= 0).any() else 0,
                    "noise_fraction": float(np.mean(lab == NOISE)),
                })
    return rows
