"""Symmetric contrastive loss and the similarity-structure consistency penalty.

The temperature is carried as a logit scale ``s`` with ``tau = exp(-s)``,
clamped to ``s in [0, ln 100]`` (so ``tau in [0.01, 1]``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import ShapeError, as_matrix, l2_normalize_rows, l2_normalize_rows_backward

LOGIT_SCALE_MIN = 0.0
LOGIT_SCALE_MAX = math.log(100.0)
DEFAULT_LOGIT_SCALE = math.log(1.0 / 0.07)


def clamp_logit_scale(s: float) -> float:
    return float(min(max(s, LOGIT_SCALE_MIN), LOGIT_SCALE_MAX))


def temperature(s: float) -> float:
    return math.exp(-s)


def logit_scale_for(tau: float) -> float:
    return math.log(1.0 / tau)


@dataclass
class LossOutput:
    value: float
    dZv: np.ndarray
    dZb: np.ndarray
    ds: float
    sce: float = 0.0
    consistency: float = 0.0


def _normalize_checked(Z: np.ndarray, name: str) -> np.ndarray:
    Z_hat, degenerate = l2_normalize_rows(Z)
    if degenerate.any():
        rows = np.flatnonzero(degenerate)[:5].tolist()
        raise ValueError(f"{name} has zero-norm rows {rows}; cannot normalize")
    return Z_hat


def _logsumexp_rows(S: np.ndarray) -> np.ndarray:
    m = S.max(axis=1)
    return np.log(np.exp(S - m[:, None]).sum(axis=1)) + m


def sce_loss(Zv, Zb, s: float) -> LossOutput:
    """Symmetric InfoNCE over in-batch pairs, with gradients.

    Row i of ``Zv`` and row i of ``Zb`` form the positive pair; every other
    row in the batch is a negative.
    """
    Zv = as_matrix(Zv)
    Zb = as_matrix(Zb)
    if Zv.shape != Zb.shape:
        raise ShapeError(f"sce_loss needs equal shapes, got {Zv.shape} and {Zb.shape}")
    n = Zv.shape[0]
    if n == 0:
        raise ValueError("sce_loss on an empty batch")
    V = _normalize_checked(Zv, "Zv")
    B = _normalize_checked(Zb, "Zb")
    scale = math.exp(s)
    # einsum and the contiguous transpose make every reduction run in the same
    # order when the two modalities are swapped, so the loss is exactly symmetric.
    S = scale * np.einsum("ik,jk->ij", V, B)
    lse_row = _logsumexp_rows(S)
    lse_col = _logsumexp_rows(np.ascontiguousarray(S.T))
    pos = np.diagonal(S)
    value = -(np.sum(pos - lse_row) + np.sum(pos - lse_col)) / (2.0 * n)

    diag = np.arange(n)
    dS = np.exp(S - lse_row[:, None]) + np.exp(S - lse_col[None, :])
    dS[diag, diag] -= 2.0
    dS /= 2.0 * n
    ds = float(np.sum(dS * S))
    dC = scale * dS
    dZv = l2_normalize_rows_backward(Zv, V, dC @ B)
    dZb = l2_normalize_rows_backward(Zb, B, dC.T @ V)
    return LossOutput(float(value), dZv, dZb, ds, sce=float(value))


def consistency_loss(H, Z) -> tuple[float, np.ndarray]:
    """``1 - cos(vec(M_H), vec(M_Z))`` with M the in-batch cosine matrices.

    Returns the value and the gradient with respect to ``Z`` (``H`` is fixed).
    """
    H = as_matrix(H)
    Z = as_matrix(Z)
    if H.shape[0] != Z.shape[0]:
        raise ShapeError(f"consistency_loss needs equal row counts, got {H.shape[0]} and {Z.shape[0]}")
    if H.shape[0] < 2:
        raise ValueError("consistency_loss needs a batch of at least 2 rows")
    Hh = _normalize_checked(H, "H")
    Zh = _normalize_checked(Z, "Z")
    MH = Hh @ Hh.T
    MZ = Zh @ Zh.T
    nH = math.sqrt(float(np.sum(MH * MH)))
    nZ = math.sqrt(float(np.sum(MZ * MZ)))
    inner = float(np.sum(MH * MZ))
    cos = inner / (nH * nZ)
    value = 1.0 - cos
    dMZ = -(MH / (nH * nZ) - inner * MZ / (nH * nZ**3))
    dZh = (dMZ + dMZ.T) @ Zh
    return value, l2_normalize_rows_backward(Z, Zh, dZh)


def total_loss(Zv, Zb, s: float, H=None, lam: float = 0.0) -> LossOutput:
    """SCE plus ``lam`` times the consistency penalty between ``H`` and ``Zv``."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    out = sce_loss(Zv, Zb, s)
    if lam == 0:
        return out
    if H is None:
        raise ValueError("total_loss with lambda > 0 needs the original teacher features H")
    cons, dZ = consistency_loss(H, Zv)
    return LossOutput(
        out.value + lam * cons,
        out.dZv + lam * dZ,
        out.dZb,
        out.ds,
        sce=out.sce,
        consistency=cons,
    )
