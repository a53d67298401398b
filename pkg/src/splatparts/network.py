"""Position -> appearance regression network with a categorical bottleneck.

The network is ``encode -> 256 -> 256 -> k -> 52`` with ReLU hidden layers.
The k bottleneck logits go through a (Gumbel-)softmax before the linear
reconstruction head, so every Gaussian is pushed to route its appearance
through a single channel. Forward and backward passes are written out by
hand in numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import NumericalOverflow
from .hashgrid import HashGridConfig, HashGridState, SparseGrad, encode, encode_backward

OUTPUT_DIM = 52
ACTIVATIONS = ("gumbel_softmax", "plain_softmax")
ENCODERS = ("hash_grid", "raw_xyz")
_TINY = 1e-300
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


@dataclass
class NetConfig:
    hidden_dim: int = 256
    bottleneck: int = 3
    output_dim: int = OUTPUT_DIM
    tau_start: float = 1.0
    tau_end: float = 0.1
    anneal_steps: int | None = None  # None: first half of training
    activation: str = "gumbel_softmax"
    encoder: str = "hash_grid"
    usage_weight: float = 0.0
    sparsity_weight: float = 0.0
    lr: float = 1e-3
    lr_hash: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    batch_size: int = 8192
    total_steps: int = 5000
    seed: int = 0
    dtype: str = "float64"
    hash: HashGridConfig = field(default_factory=HashGridConfig)

    def __post_init__(self):
        if isinstance(self.hash, dict):
            self.hash = HashGridConfig(**self.hash)
        if self.bottleneck < 2:
            raise ValueError("bottleneck size must be at least 2")
        if self.hidden_dim < 1 or self.output_dim < 1:
            raise ValueError("layer widths must be positive")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.usage_weight < 0 or self.sparsity_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be positive and total_steps non-negative")

    @property
    def input_dim(self) -> int:
        return self.hash.output_dim if self.encoder == "hash_grid" else 3

    def tau_at(self, step: int) -> float:
        anneal = self.anneal_steps if self.anneal_steps is not None else self.total_steps // 2
        if anneal <= 0:
            return self.tau_end
        t = min(step / anneal, 1.0)
        return self.tau_start + (self.tau_end - self.tau_start) * t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class DisentangleModel:
    config: NetConfig
    params: dict  # W1..b4
    hash_state: HashGridState | None = None
    # position normalisation (lo, extent) fitted on the training avatar
    norm_lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    norm_extent: np.ndarray = field(default_factory=lambda: np.ones(3))

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "DisentangleModel":
        dtype = np.dtype(config.dtype)
        hash_state = None
        if config.encoder == "hash_grid":
            hash_state = HashGridState.init(config.hash, rng, dtype=dtype)
        dims = [config.input_dim, config.hidden_dim, config.hidden_dim, config.bottleneck, config.output_dim]
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
            bound = np.sqrt(6.0 / fan_in) if i < 3 else np.sqrt(3.0 / fan_in)
            params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
        return cls(config, params, hash_state)

    def copy(self) -> "DisentangleModel":
        hs = None
        if self.hash_state is not None:
            hs = HashGridState(self.hash_state.embeddings.copy(), self.hash_state.config)
        return DisentangleModel(self.config, {k: v.copy() for k, v in self.params.items()}, hs,
                                self.norm_lo.copy(), self.norm_extent.copy())

    def check(self) -> None:
        dims = [self.config.input_dim, self.config.hidden_dim, self.config.hidden_dim,
                self.config.bottleneck, self.config.output_dim]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
            if self.params[f"W{i}"].shape != (a, b) or self.params[f"b{i}"].shape != (b,):
                raise ValueError(f"layer {i} has inconsistent shape")
        tensors = list(self.params.values())
        if self.hash_state is not None:
            tensors.append(self.hash_state.embeddings)
        if not all(np.all(np.isfinite(t)) for t in tensors):
            raise ValueError("model contains non-finite weights")


@dataclass
class ForwardCache:
    x: np.ndarray
    enc_cache: tuple | None
    y: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    z: np.ndarray
    noise: np.ndarray | None
    tau: float
    v: np.ndarray
    yhat: np.ndarray


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    u = rng.random(shape)
    u[u == 0.0] = np.nextafter(0.0, 1.0)  # open interval (0, 1)
    return (-np.log(-np.log(u))).astype(dtype)


def softmax(z, axis=-1):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gumbel_softmax(z, tau: float, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """Relaxed categorical sample ``softmax((z + g) / tau)``, g ~ Gumbel(0, 1).

    Pass ``noise`` to fix g (e.g. zeros for the noise-free limit).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be given")
        noise = sample_gumbel(z.shape, rng, z.dtype)
    return softmax((z + noise) / tau)


def encode_input(model: DisentangleModel, x, cache: bool = False, corners=None):
    if model.config.encoder == "raw_xyz":
        y = np.asarray(x, dtype=model.config.dtype)
        return (y, None) if cache else y
    return encode(x, model.hash_state, cache=cache, corners=corners)


def forward(model: DisentangleModel, x, tau: float, rng=None, noise=None, corners=None) -> ForwardCache:
    """Full forward pass on normalised positions ``x`` (B, 3).

    ``noise`` fixes the Gumbel sample (drawn from ``rng`` otherwise);
    ``corners`` passes precomputed hash-grid lookups for ``x``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    p = model.params
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y, enc_cache = encode_input(model, x, cache=True, corners=corners)
    a1 = y @ p["W1"] + p["b1"]
    h1 = np.maximum(a1, 0)
    a2 = h1 @ p["W2"] + p["b2"]
    h2 = np.maximum(a2, 0)
    z = h2 @ p["W3"] + p["b3"]
    if model.config.activation == "gumbel_softmax":
        if noise is None:
            noise = sample_gumbel(z.shape, rng, z.dtype)
        v = softmax((z + noise) / tau)
    else:
        noise, tau = None, 1.0
        v = softmax(z)
    yhat = v @ p["W4"] + p["b4"]
    if not np.all(np.isfinite(yhat)) or not np.all(np.isfinite(z)):
        raise NumericalOverflow("non-finite activation in forward pass")
    return ForwardCache(x, enc_cache, y, a1, h1, a2, h2, z, noise, tau, v, yhat)


def logits(model: DisentangleModel, x, chunk: int = 16384) -> np.ndarray:
    """Pre-bottleneck logits z for many points, evaluated in chunks."""
    p = model.params
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    out = []
    for start in range(0, len(x), chunk):
        y = encode_input(model, x[start:start + chunk])
        h1 = np.maximum(y @ p["W1"] + p["b1"], 0)
        h2 = np.maximum(h1 @ p["W2"] + p["b2"], 0)
        out.append(h2 @ p["W3"] + p["b3"])
    if not out:
        return np.zeros((0, model.config.bottleneck))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# losses

def loss_reconstruction(yhat, target) -> float:
    yhat, target = np.asarray(yhat), np.asarray(target)
    if yhat.shape != target.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {target.shape}")
    return float(np.mean((yhat - target) ** 2))


def _xlogx(p):
    p = np.asarray(p)
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def loss_sparsity(probs) -> float:
    """Mean per-row entropy of bottleneck probabilities."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability vectors")
    return float(-_xlogx(probs).sum(axis=1).mean())


def loss_usage(probs) -> float:
    """``log k - H(u)`` with u the batch-mean of soft probabilities."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    u = probs.mean(axis=0)
    return float(np.log(probs.shape[1]) + _xlogx(u).sum())


def usage_metric(probs) -> float:
    """``log k - H(u)`` with u the argmax frequencies (not differentiable)."""
    probs = np.atleast_2d(np.asarray(probs))
    k = probs.shape[1]
    u = np.bincount(np.argmax(probs, axis=1), minlength=k) / len(probs)
    return float(np.log(k) + _xlogx(u).sum())


# ---------------------------------------------------------------------------
# backward

def backward(model: DisentangleModel, cache: ForwardCache, target, upstream: float = 1.0):
    """Analytic gradients of the weighted training loss for one forward pass.

    Returns ``(losses, grads)``; ``grads`` holds dense arrays for W1..b4 and a
    :class:`SparseGrad` under ``"embeddings"`` when the hash encoder is used.
    """
    cfg = model.config
    p = model.params
    target = np.asarray(target, dtype=cache.yhat.dtype)
    if target.shape != cache.yhat.shape:
        raise ValueError(f"target shape {target.shape} does not match output {cache.yhat.shape}")
    B = len(target)
    v = cache.v

    losses = {"reconstruction": loss_reconstruction(cache.yhat, target)}
    d_yhat = upstream * 2.0 * (cache.yhat - target) / target.size
    d_v = d_yhat @ p["W4"].T
    grads = {"W4": cache.v.T @ d_yhat, "b4": d_yhat.sum(axis=0)}

    if cfg.sparsity_weight > 0:
        losses["sparsity"] = float(-_xlogx(v).sum(axis=1).mean())
        d_v = d_v - upstream * cfg.sparsity_weight * (np.log(np.maximum(v, _TINY)) + 1.0) / B
    if cfg.usage_weight > 0:
        u = v.mean(axis=0)
        losses["usage"] = float(np.log(len(u)) + _xlogx(u).sum())
        d_v = d_v + upstream * cfg.usage_weight * (np.log(np.maximum(u, _TINY)) + 1.0)[None, :] / B
    losses["total"] = (losses["reconstruction"] + cfg.sparsity_weight * losses.get("sparsity", 0.0)
                       + cfg.usage_weight * losses.get("usage", 0.0))

    d_z = v * (d_v - (d_v * v).sum(axis=1, keepdims=True)) / cache.tau
    grads["W3"] = cache.h2.T @ d_z
    grads["b3"] = d_z.sum(axis=0)
    d_a2 = (d_z @ p["W3"].T) * (cache.a2 > 0)
    grads["W2"] = cache.h1.T @ d_a2
    grads["b2"] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ p["W2"].T) * (cache.a1 > 0)
    grads["W1"] = cache.y.T @ d_a1
    grads["b1"] = d_a1.sum(axis=0)
    if cfg.encoder == "hash_grid":
        d_y = d_a1 @ p["W1"].T
        grads["embeddings"] = encode_backward(cache.x, d_y, model.hash_state, cached=cache.enc_cache)
    return losses, grads


def loss_and_grad(model: DisentangleModel, x, target, tau: float, rng=None, noise=None):
    cache = forward(model, x, tau, rng=rng, noise=noise)
    losses, grads = backward(model, cache, target)
    return losses, grads, cache


__all__ = [
    "NetConfig", "DisentangleModel", "ForwardCache", "SparseGrad", "forward", "backward", "logits",
    "loss_and_grad", "gumbel_softmax", "sample_gumbel", "softmax", "loss_reconstruction",
    "loss_sparsity", "loss_usage", "usage_metric",
]
