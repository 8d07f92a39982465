"""Student-side encoder with a shared temporal attention vector.

A single logit vector ``alpha`` (length T) is turned into weights by a
softmax and multiplied into every channel of the C x T input. The reweighted
signal is flattened channel-major and passed through a two-layer projection
head ``LayerNorm(W2 gelu(W1 x + b1) + b2)``.

With ``use_temporal_attention=False`` the reweighting is skipped, which gives
the attention-free baseline. Outputs are not L2-normalized here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import StaleCacheError, glorot_uniform
from .core_math import Rng, ShapeError, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax, softmax_backward


@dataclass(frozen=True)
class EncoderConfig:
    channels: int
    time_steps: int
    hidden_dim: int
    out_dim: int
    use_temporal_attention: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"EncoderConfig.channels must be >= 1, got {self.channels}")
        if self.time_steps < 2:
            raise ValueError(f"EncoderConfig.time_steps must be >= 2, got {self.time_steps}")
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise ValueError("EncoderConfig.hidden_dim and out_dim must be >= 1")

    @property
    def in_features(self) -> int:
        return self.channels * self.time_steps

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "time_steps": self.time_steps,
            "hidden_dim": self.hidden_dim,
            "out_dim": self.out_dim,
            "use_temporal_attention": self.use_temporal_attention,
        }


def init_encoder(config: EncoderConfig, rng: Rng) -> dict[str, np.ndarray]:
    return {
        "alpha": np.zeros(config.time_steps),
        "W1": glorot_uniform(rng, config.hidden_dim, config.in_features),
        "b1": np.zeros(config.hidden_dim),
        "W2": glorot_uniform(rng, config.out_dim, config.hidden_dim),
        "b2": np.zeros(config.out_dim),
        "ln_gain": np.ones(config.out_dim),
        "ln_bias": np.zeros(config.out_dim),
    }


def get_attention_profile(params: dict) -> np.ndarray:
    return softmax(params["alpha"])


@dataclass
class EncoderCache:
    config: EncoderConfig
    params: dict
    X: np.ndarray
    weights: np.ndarray | None
    flat: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    ln_cache: tuple
    consumed: bool = field(default=False)


def encoder_forward(params: dict, config: EncoderConfig, X) -> tuple[np.ndarray, EncoderCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (config.channels, config.time_steps):
        raise ShapeError(
            f"encoder expects signals of shape (N, {config.channels}, {config.time_steps}), got {X.shape}"
        )
    weights = None
    Xw = X
    if config.use_temporal_attention:
        weights = softmax(params["alpha"])
        Xw = X * weights
    flat = Xw.reshape(X.shape[0], -1)
    pre = flat @ params["W1"].T + params["b1"]
    hidden = gelu(pre)
    out = hidden @ params["W2"].T + params["b2"]
    Z, ln_cache = layer_norm(out, params["ln_gain"], params["ln_bias"])
    return Z, EncoderCache(config, params, X, weights, flat, pre, hidden, ln_cache)


def encoder_backward(cache: EncoderCache, dZ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Return ``(grads, dX)``. ``grads['alpha']`` is zero when attention is off."""
    if cache.consumed:
        raise StaleCacheError("encoder cache was already used for a backward pass")
    cache.consumed = True
    p = cache.params
    dZ = np.asarray(dZ, dtype=np.float64)
    if dZ.shape != (cache.X.shape[0], cache.config.out_dim):
        raise ShapeError(f"dZ shape {dZ.shape} does not match encoder output")
    grads: dict[str, np.ndarray] = {}
    d_out, grads["ln_gain"], grads["ln_bias"] = layer_norm_backward(cache.ln_cache, dZ)
    grads["W2"] = d_out.T @ cache.hidden
    grads["b2"] = d_out.sum(axis=0)
    d_pre = (d_out @ p["W2"]) * gelu_grad(cache.pre)
    grads["W1"] = d_pre.T @ cache.flat
    grads["b1"] = d_pre.sum(axis=0)
    d_xw = (d_pre @ p["W1"]).reshape(cache.X.shape)
    if cache.weights is None:
        grads["alpha"] = np.zeros_like(p["alpha"])
        dX = d_xw
    else:
        d_weights = np.einsum("nct,nct->t", d_xw, cache.X)
        grads["alpha"] = softmax_backward(cache.weights, d_weights)
        dX = d_xw * cache.weights
    return grads, dX


def export_attention_csv(params: dict, path, digest: str | None = None) -> Path:
    """Write the attention profile as ``t,weight`` rows."""
    path = Path(path)
    profile = get_attention_profile(params)
    with path.open("w", newline="") as fh:
        if digest:
            fh.write(f"# config_digest: {digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "weight"])
        for t, v in enumerate(profile):
            w.writerow([t, repr(float(v))])
    return path
