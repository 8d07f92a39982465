"""Teacher-side ShrinkAdapter.

    z = W_up act(W_down h)

with optional LayerNorm, dropout and residual add, applied in the fixed order

    down -> activation -> up -> LayerNorm -> dropout -> (+ h)

The residual add comes last so that a zero-weight adapter with the residual
on is exactly the identity map. There are no bias terms on the projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .core_math import (
    Rng,
    ShapeError,
    as_matrix,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    relu,
    relu_grad,
)


class Activation(str, Enum):
    GELU = "gelu"
    RELU = "relu"
    NONE = "none"


class StaleCacheError(RuntimeError):
    """Backward was called with a cache that was already consumed."""


@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int
    bottleneck_dim: int
    out_dim: int
    use_residual: bool = False
    activation: Activation = Activation.GELU
    use_layernorm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        for name in ("in_dim", "bottleneck_dim", "out_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"AdapterConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.use_residual and self.out_dim != self.in_dim:
            raise ValueError(
                f"residual adapter needs out_dim == in_dim, got {self.out_dim} != {self.in_dim}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @classmethod
    def from_ratio(cls, in_dim: int, ratio, out_dim: int | None = None, **kw) -> "AdapterConfig":
        """Build a config whose bottleneck is ``ratio * in_dim`` (must be integral)."""
        bottleneck = Fraction(ratio).limit_denominator(1 << 16) * in_dim
        if bottleneck.denominator != 1:
            raise ValueError(f"ratio {ratio} does not give an integral bottleneck for in_dim={in_dim}")
        return cls(in_dim, int(bottleneck), in_dim if out_dim is None else out_dim, **kw)

    @property
    def compression_ratio(self) -> Fraction:
        return Fraction(self.bottleneck_dim, self.in_dim)

    def param_count(self) -> int:
        n = self.in_dim * self.bottleneck_dim + self.bottleneck_dim * self.out_dim
        if self.use_layernorm:
            n += 2 * self.out_dim
        return n

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "bottleneck_dim": self.bottleneck_dim,
            "out_dim": self.out_dim,
            "use_residual": self.use_residual,
            "activation": self.activation.value,
            "use_layernorm": self.use_layernorm,
            "dropout_rate": self.dropout_rate,
        }


def glorot_uniform(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_adapter(config: AdapterConfig, rng: Rng) -> dict[str, np.ndarray]:
    params = {
        "W_down": glorot_uniform(rng, config.bottleneck_dim, config.in_dim),
        "W_up": glorot_uniform(rng, config.out_dim, config.bottleneck_dim),
    }
    if config.use_layernorm:
        params["ln_gain"] = np.ones(config.out_dim)
        params["ln_bias"] = np.zeros(config.out_dim)
    return params


def _activate(kind: Activation, x):
    if kind is Activation.GELU:
        return gelu(x)
    if kind is Activation.RELU:
        return relu(x)
    return x


def _activate_grad(kind: Activation, x):
    if kind is Activation.GELU:
        return gelu_grad(x)
    if kind is Activation.RELU:
        return relu_grad(x)
    return np.ones_like(x)


@dataclass
class AdapterCache:
    config: AdapterConfig
    params: dict
    H: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    ln_cache: tuple | None
    mask: np.ndarray | None
    consumed: bool = field(default=False)


def adapter_forward(
    params: dict,
    config: AdapterConfig,
    H,
    rng: Rng | None = None,
    train_mode: bool = False,
) -> tuple[np.ndarray, AdapterCache]:
    H = as_matrix(H)
    if H.shape[1] != config.in_dim:
        raise ShapeError(f"adapter expects {config.in_dim} input features, got batch of shape {H.shape}")
    pre = H @ params["W_down"].T
    act = _activate(config.activation, pre)
    Z = act @ params["W_up"].T
    ln_cache = None
    if config.use_layernorm:
        Z, ln_cache = layer_norm(Z, params["ln_gain"], params["ln_bias"])
    mask = None
    if train_mode and config.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = 1.0 - config.dropout_rate
        mask = (rng.random(Z.shape) < keep) / keep
        Z = Z * mask
    if config.use_residual:
        Z = Z + H
    return Z, AdapterCache(config, params, H, pre, act, ln_cache, mask)


def adapter_backward(cache: AdapterCache, dZ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Return ``(grads, dH)``; ``grads`` has the same keys as the params."""
    if cache.consumed:
        raise StaleCacheError("adapter cache was already used for a backward pass")
    cache.consumed = True
    cfg = cache.config
    dZ = as_matrix(dZ)
    if dZ.shape != (cache.H.shape[0], cfg.out_dim):
        raise ShapeError(f"dZ shape {dZ.shape} does not match forward output {(cache.H.shape[0], cfg.out_dim)}")
    grads: dict[str, np.ndarray] = {}
    d = dZ
    if cache.mask is not None:
        d = d * cache.mask
    if cfg.use_layernorm:
        d, grads["ln_gain"], grads["ln_bias"] = layer_norm_backward(cache.ln_cache, d)
    grads["W_up"] = d.T @ cache.act
    d_act = d @ cache.params["W_up"]
    d_pre = d_act * _activate_grad(cfg.activation, cache.pre)
    grads["W_down"] = d_pre.T @ cache.H
    dH = d_pre @ cache.params["W_down"]
    if cfg.use_residual:
        dH = dH + dZ
    return grads, dH
