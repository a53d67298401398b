"""Training of the disentanglement network and channel-argmax labelling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .avatar import Avatar, quat_normalize, to_global_space
from .errors import NumericalOverflow, TrainingDiverged, ZeroScale
from .hashgrid import apply_normalization, corner_slots, normalize_positions
from .network import PARAM_NAMES, DisentangleModel, NetConfig, backward, forward, logits

log = logging.getLogger(__name__)

SH_CLIP = 2.4


@dataclass
class TrainingTargets:
    features: np.ndarray  # (N, 56): quat(4), scale(3), opacity(1), sh(48)
    reconstruction: np.ndarray  # (N, 52): scale(3), opacity(1), sh(48)


def build_targets(avatar_global: Avatar) -> TrainingTargets:
    """Per-Gaussian 56-dim feature vectors and the 52-dim regression targets."""
    if avatar_global.space != "global":
        raise ValueError("targets are built from an avatar in global space")
    g = avatar_global.gaussians
    norms = np.linalg.norm(g.scale, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroScale(f"{int(np.sum(norms == 0))} Gaussian(s) with zero-norm scale")
    scale = g.scale / norms
    sh = np.clip(g.sh, -SH_CLIP, SH_CLIP)
    quat = quat_normalize(g.rot)
    recon = np.concatenate([scale, g.opacity[:, None], sh], axis=1)
    return TrainingTargets(np.concatenate([quat, recon], axis=1), recon)


class Adam:
    """Adam over the dense MLP weights plus a lazy variant for hash tables.

    Hash-table rows receive moment and parameter updates only on steps where
    they get a gradient; bias correction uses the global step count.
    """

    def __init__(self, model: DisentangleModel, cfg: NetConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        if model.hash_state is not None:
            emb = model.hash_state.embeddings
            self.m_emb = np.zeros((emb.shape[0] * emb.shape[1], emb.shape[2]), dtype=emb.dtype)
            self.v_emb = np.zeros_like(self.m_emb)

    def step(self, model: DisentangleModel, grads: dict) -> None:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in PARAM_NAMES:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            model.params[name] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        sparse = grads.get("embeddings")
        if sparse is not None:
            idx, g = sparse.index, sparse.values
            m = b1 * self.m_emb[idx] + (1 - b1) * g
            v = b2 * self.v_emb[idx] + (1 - b2) * g * g
            self.m_emb[idx] = m
            self.v_emb[idx] = v
            flat = model.hash_state.embeddings.reshape(-1, g.shape[1])
            flat[idx] -= cfg.lr_hash * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    reconstruction: list = field(default_factory=list)
    sparsity: list = field(default_factory=list)
    usage: list = field(default_factory=list)
    total: list = field(default_factory=list)
    channel_usage: np.ndarray | None = None  # final argmax counts per channel
    target_variance: float = float("nan")

    def record(self, step: int, tau: float, losses: dict) -> None:
        self.steps.append(step)
        self.tau.append(tau)
        self.reconstruction.append(losses["reconstruction"])
        self.sparsity.append(losses.get("sparsity", float("nan")))
        self.usage.append(losses.get("usage", float("nan")))
        self.total.append(losses["total"])


def normalized_positions(model: DisentangleModel, avatar_global: Avatar) -> np.ndarray:
    x = apply_normalization(avatar_global.gaussians.mu, (model.norm_lo, model.norm_extent))
    return np.clip(x, 0.0, 1.0)


def train(avatar: Avatar, config: NetConfig, log_every: int = 0):
    """Fit the network to regress appearance from position.

    Returns ``(model, TrainingLog)``. The run is fully determined by
    ``config.seed``.
    """
    if len(avatar) == 0:
        raise ValueError("cannot train on an empty avatar")
    rng = np.random.default_rng(config.seed)
    glob = to_global_space(avatar)
    targets = build_targets(glob).reconstruction
    x_all, (lo, extent) = normalize_positions(glob.gaussians.mu)

    model = DisentangleModel.init(config, rng)
    model.norm_lo, model.norm_extent = lo, extent
    targets = targets.astype(config.dtype)

    corners = None
    if config.encoder == "hash_grid":
        slots, weights = corner_slots(x_all, config.hash)
        corners = (slots, weights.astype(config.dtype))

    history = TrainingLog(target_variance=float(np.mean(np.var(targets, axis=0))))
    opt = Adam(model, config)
    n = len(x_all)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    for step in range(config.total_steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        batch = order[cursor:cursor + bs]
        cursor += bs
        tau = config.tau_at(step)
        try:
            sub = None if corners is None else (corners[0][batch], corners[1][batch])
            cache = forward(model, x_all[batch], tau, rng=rng, corners=sub)
        except NumericalOverflow as exc:
            raise TrainingDiverged(f"step {step}: {exc} (tau={tau:.4g})") from exc
        losses, grads = backward(model, cache, targets[batch])
        if not np.isfinite(losses["total"]):
            raise TrainingDiverged(f"step {step}: non-finite loss {losses} (tau={tau:.4g}, lr={config.lr})")
        opt.step(model, grads)
        history.record(step, tau, losses)
        if log_every and (step % log_every == 0 or step == config.total_steps - 1):
            log.info("step %d tau %.3f loss %.5f", step, tau, losses["total"])

    labels = np.argmax(logits(model, x_all), axis=1)
    history.channel_usage = np.bincount(labels, minlength=config.bottleneck)
    return model, history


def assign_segments(model: DisentangleModel, avatar: Avatar) -> np.ndarray:
    """Channel label per Gaussian: argmax of the noise-free bottleneck.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    glob = to_global_space(avatar)
    return np.argmax(logits(model, normalized_positions(model, glob)), axis=1).astype(np.int64)
