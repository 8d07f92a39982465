"""Dense numeric kernels shared by the adapter, encoder and losses.

Every array handled here is a float64 numpy array. Matrices are 2-D
(rows x cols); "vectors" are 1-D. Nothing in this module mutates its inputs.

Randomness goes through :class:`Rng`, a thin wrapper around numpy's
Philox4x64 counter-based bit generator. The algorithm is fixed for the
lifetime of the package so that seeded results stay stable.
"""

from __future__ import annotations

import hashlib
import json
from typing import Callable

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_of(obj) -> str:
    """sha256 hex digest of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Seeded random stream (Philox4x64 counter-based generator).

    Child streams are derived from ``(seed, label)`` by hashing, so the same
    label always yields the same stream regardless of how many draws the
    parent has made.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, label) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# linear algebra


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def l2_normalize_rows(m, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit Euclidean norm.

    Rows whose norm is below ``eps`` are passed through unchanged and marked
    in the returned boolean mask instead of producing NaNs.
    """
    m = as_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    return m / safe[:, None], degenerate


def l2_normalize_rows_backward(x: np.ndarray, x_hat: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    """Gradient of row normalization ``x_hat = x / |x|`` given ``dL/dx_hat``."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    proj = np.einsum("ij,ij->i", x_hat, d_hat)
    return (d_hat - x_hat * proj[:, None]) / norms[:, None]


def cosine_similarity_matrix(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine similarity needs equal widths, got {a.shape} and {b.shape}")
    a_hat, _ = l2_normalize_rows(a)
    b_hat, _ = l2_normalize_rows(b)
    return a_hat @ b_hat.T


# ---------------------------------------------------------------------------
# activations


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax over the last axis."""
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


def normal_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / SQRT2))


def normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return x * normal_cdf(x)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return normal_cdf(x) + x * normal_pdf(x)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_grad(x):
    return (np.asarray(x, dtype=np.float64) > 0.0).astype(np.float64)


# ---------------------------------------------------------------------------
# layer norm


def layer_norm(x, gain, bias, eps: float = 1e-5) -> tuple[np.ndarray, tuple]:
    """Normalize along the last axis, then apply ``gain * x_hat + bias``.

    Works on a single vector or on a batch of row vectors. Returns the output
    and a cache for :func:`layer_norm_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: input width {x.shape[-1]} vs gain {gain.shape} / bias {bias.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv_std
    return x_hat * gain + bias, (x_hat, inv_std, gain)


def layer_norm_backward(cache: tuple, dy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dgain, dbias)``."""
    x_hat, inv_std, gain = cache
    dy = np.asarray(dy, dtype=np.float64)
    lead = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * x_hat, axis=lead)
    dbias = np.sum(dy, axis=lead)
    dxh = dy * gain
    n = x_hat.shape[-1]
    dx = (
        inv_std
        / n
        * (n * dxh - dxh.sum(axis=-1, keepdims=True) - x_hat * (dxh * x_hat).sum(axis=-1, keepdims=True))
    )
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x.copy()))
        x[i] = orig - h
        fm = float(f(x.copy()))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around coordinate {i} (f+={fp}, f-={fm})")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name}: non-finite values encountered")
