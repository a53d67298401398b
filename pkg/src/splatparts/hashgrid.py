"""Multiresolution spatial-hash encoding of 3D positions.

Each level owns a table of ``table_size x F`` trainable features. A point is
scaled to the level's lattice, its 8 surrounding corners are hashed into the
table and their features trilinearly interpolated. Level outputs are
concatenated, giving ``L * F`` features per point.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size: int = 2 ** 19
    base_resolution: int = 16
    finest_resolution: int = 2048
    growth_factor: float | None = None

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1 or self.base_resolution < 1:
            raise ValueError("levels, features_per_level and base_resolution must be positive")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.growth_factor is not None and self.growth_factor <= 1:
            raise ValueError("growth_factor must exceed 1")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def growth(self) -> float:
        if self.growth_factor is not None:
            return float(self.growth_factor)
        if self.levels == 1:
            return 2.0
        return math.exp(math.log(self.finest_resolution / self.base_resolution) / (self.levels - 1))

    def resolutions(self) -> np.ndarray:
        b = self.growth
        # small slack so that a finest level of exactly 2048 is not floored to 2047
        return np.array([math.floor(self.base_resolution * b ** lvl + 1e-9) for lvl in range(self.levels)],
                        dtype=np.int64)


@dataclass
class HashGridState:
    embeddings: np.ndarray  # (L, table_size, F)
    config: HashGridConfig

    @classmethod
    def init(cls, config: HashGridConfig, rng: np.random.Generator, scale: float = 1e-4,
             dtype=np.float64) -> "HashGridState":
        shape = (config.levels, config.table_size, config.features_per_level)
        return cls(rng.uniform(-scale, scale, size=shape).astype(dtype), config)


@dataclass
class SparseGrad:
    """Gradient restricted to touched slots of the flattened (L * table_size) table."""

    index: np.ndarray  # (M,) sorted unique flat slot ids
    values: np.ndarray  # (M, F)

    def to_dense(self, config: HashGridConfig) -> np.ndarray:
        dense = np.zeros((config.levels * config.table_size, config.features_per_level), dtype=self.values.dtype)
        dense[self.index] = self.values
        return dense.reshape(config.levels, config.table_size, config.features_per_level)


def normalize_positions(points):
    """Min-max normalise points into [0.01, 0.99]^3.

    Returns the normalised points and the ``(lo, extent)`` transform. Axes
    with zero extent get a unit extent centred on the shared value.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot normalise an empty point set")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinate in point set")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    flat = extent == 0
    lo = np.where(flat, lo - 0.5, lo)
    extent = np.where(flat, 1.0, extent)
    transform = (lo, extent)
    return apply_normalization(pts, transform), transform


def apply_normalization(points, transform):
    lo, extent = transform
    return 0.01 + 0.98 * (np.asarray(points, dtype=np.float64) - lo) / extent


def invert_normalization(normalized, transform):
    lo, extent = transform
    return (np.asarray(normalized, dtype=np.float64) - 0.01) / 0.98 * extent + lo


def corner_slots(x, config: HashGridConfig):
    """Table slots and trilinear weights of the 8 lattice corners per level.

    Returns ``(slots, weights)`` with shapes (B, L, 8); slots index into the
    level's own table. Corner c has offsets ``(c & 1, c >> 1 & 1, c >> 2 & 1)``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if np.any((x < 0) | (x > 1)):
        warnings.warn("positions outside the unit cube were clamped", RuntimeWarning, stacklevel=3)
        x = np.clip(x, 0.0, 1.0)
    res = config.resolutions().astype(np.float64)
    pos = x[:, None, :] * res[None, :, None]  # (B, L, 3)
    base = np.floor(pos)
    frac = pos - base
    lo = base.astype(np.uint64)
    # per axis: hashed coordinate and weight of the lower / upper corner, (B, L, 2)
    h = [np.stack([lo[..., a] * PRIMES[a], (lo[..., a] + np.uint64(1)) * PRIMES[a]], axis=-1) for a in range(3)]
    w = [np.stack([1.0 - frac[..., a], frac[..., a]], axis=-1) for a in range(3)]
    slots = (h[2][..., :, None, None] ^ h[1][..., None, :, None] ^ h[0][..., None, None, :])
    slots = (slots & np.uint64(config.table_size - 1)).reshape(*pos.shape[:2], 8)
    weights = (w[2][..., :, None, None] * w[1][..., None, :, None] * w[0][..., None, None, :])
    return slots.astype(np.int64), weights.reshape(*pos.shape[:2], 8)


def encode(x, state: HashGridState, cache: bool = False, corners=None):
    """Encode points in [0,1]^3 to ``(B, L*F)`` features.

    ``corners`` may carry a precomputed :func:`corner_slots` result for ``x``.
    With ``cache=True`` the ``(slots, weights)`` pair is returned as well so
    the backward pass does not recompute the hashing.
    """
    cfg = state.config
    slots, weights = corners if corners is not None else corner_slots(x, cfg)
    levels = np.arange(cfg.levels)[None, :, None]
    feats = state.embeddings[levels, slots]  # (B, L, 8, F)
    out = np.einsum("blc,blcf->blf", weights.astype(state.embeddings.dtype), feats)
    out = out.reshape(len(slots), cfg.output_dim)
    if cache:
        return out, (slots, weights)
    return out


def encode_backward(x, upstream_grad, state: HashGridState, cached=None) -> SparseGrad:
    """Scatter ``upstream_grad`` (B, L*F) onto the touched embedding slots."""
    cfg = state.config
    grad = np.asarray(upstream_grad)
    slots, weights = cached if cached is not None else corner_slots(x, cfg)
    B = slots.shape[0]
    if grad.shape != (B, cfg.output_dim):
        raise ValueError(f"upstream gradient has shape {grad.shape}, expected {(B, cfg.output_dim)}")
    grad = grad.reshape(B, cfg.levels, 1, cfg.features_per_level)
    contrib = weights[..., None].astype(grad.dtype) * grad  # (B, L, 8, F)
    flat = (slots + (np.arange(cfg.levels) * cfg.table_size)[None, :, None]).reshape(-1)
    contrib = contrib.reshape(-1, cfg.features_per_level)
    total = cfg.levels * cfg.table_size
    if total <= 16 * len(flat):
        # small table: dense accumulation, then keep touched slots
        touched = np.bincount(flat, minlength=total) > 0
        index = np.flatnonzero(touched)
        values = np.stack([np.bincount(flat, weights=contrib[:, f], minlength=total)[index]
                           for f in range(cfg.features_per_level)], axis=1)
    else:
        index, inverse = np.unique(flat, return_inverse=True)
        values = np.stack([np.bincount(inverse, weights=contrib[:, f], minlength=len(index))
                           for f in range(cfg.features_per_level)], axis=1)
    return SparseGrad(index, values.astype(grad.dtype))
