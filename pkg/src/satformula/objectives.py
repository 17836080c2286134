"""Loss terms: feature consistency, physics residual, MSE, cross-entropy.

``consistency_loss`` and ``mse_loss`` only use arithmetic, ``.sum`` and
``.mean``, so they accept numpy arrays and autodiff tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .expr import PAD

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_con: float = 0.5
    lambda_mse: float = 1.0
    lambda_ce: float = 0.5
    lambda_phy: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    con: float
    mse: float
    ce: float
    phy: float
    total: float

    def selection_score(self, w: LossWeights) -> float:
        """The candidate ranking objective (consistency term excluded)."""
        return w.lambda_mse * self.mse + w.lambda_ce * self.ce + w.lambda_phy * self.phy


@dataclass(frozen=True)
class PhysicsField:
    E: np.ndarray  # (H, W, 2): x component then y component
    rho: np.ndarray  # (H, W)

    def __post_init__(self):
        E = np.asarray(self.E, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        if E.ndim != 3 or E.shape[2] != 2:
            raise ShapeError(f"E must be (H, W, 2), got {E.shape}")
        if rho.shape != E.shape[:2]:
            raise ShapeError(f"rho shape {rho.shape} does not match E {E.shape[:2]}")
        if not (np.all(np.isfinite(E)) and np.all(np.isfinite(rho))):
            raise ValueError("physics field contains non-finite values")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "rho", rho)


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def consistency_loss(F, F_target):
    """Mean over rows of the squared L2 distance between feature vectors."""
    _same_shape(F, F_target, "consistency_loss")
    if len(F.shape) != 2 or F.shape[0] < 1:
        raise ShapeError("consistency_loss expects an (N, d) pair with N >= 1")
    diff = F - F_target
    return (diff * diff).sum(axis=1).mean()


def mse_loss(pred, target):
    _same_shape(pred, target, "mse_loss")
    if int(np.prod(pred.shape)) < 1:
        raise ShapeError("mse_loss on empty input")
    diff = pred - target
    return (diff * diff).mean()


# -- finite differences ---------------------------------------------------------


def _check_grid(shape):
    if shape[0] < 3 or shape[1] < 3:
        raise ShapeError(f"grid must be at least 3x3, got {shape[0]}x{shape[1]}")


def divergence(E, h: float = 1.0) -> np.ndarray:
    """dEx/dx + dEy/dy; central differences inside, one-sided on the border.

    x runs along columns (axis 1) and y along rows (axis 0).
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 3 or E.shape[2] != 2:
        raise ShapeError(f"E must be (H, W, 2), got {E.shape}")
    _check_grid(E.shape)
    return np.gradient(E[..., 0], h, axis=1, edge_order=1) + np.gradient(E[..., 1], h, axis=0, edge_order=1)


def gradient_field(band, h: float = 1.0) -> np.ndarray:
    """(H, W, 2) spatial gradient of a scalar band, same stencil as :func:`divergence`."""
    band = np.asarray(band, dtype=np.float64)
    _check_grid(band.shape)
    return np.stack(
        [np.gradient(band, h, axis=1, edge_order=1), np.gradient(band, h, axis=0, edge_order=1)], axis=-1
    )


def physics_loss(fields_: Sequence[PhysicsField], h: float = 1.0) -> float:
    """Sum over fields of the squared pixel residual ``div(E_k) - rho_k``."""
    if len(fields_) < 1:
        raise ValueError("physics_loss needs at least one field")
    total = 0.0
    for f in fields_:
        if not isinstance(f, PhysicsField):
            f = PhysicsField(*f)
        r = divergence(f.E, h) - f.rho
        total += float(np.sum(r * r))
    return total


def prediction_field(pred, target=None, rho=None, h: float = 1.0) -> PhysicsField:
    """Field for a predicted band: E = grad(pred), rho = laplacian(target) unless given."""
    E = gradient_field(pred, h)
    if rho is None:
        if target is None:
            raise ValueError("need either target or rho")
        rho = divergence(gradient_field(target, h), h)
    return PhysicsField(E, rho)


def _diff_matrix(n: int, h: float) -> sp.csr_matrix:
    """1D matrix form of ``np.gradient(..., edge_order=1)``."""
    rows, cols, vals = [0, 0], [0, 1], [-1.0 / h, 1.0 / h]
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [n - 1, n - 1]
    cols += [n - 2, n - 1]
    vals += [-1.0 / h, 1.0 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=32)
def laplacian_operator(H: int, W: int, h: float = 1.0) -> sp.csr_matrix:
    """Sparse (H*W, H*W) operator equal to ``divergence(gradient_field(.))`` on row-major bands."""
    _check_grid((H, W))
    dx = _diff_matrix(W, h)
    dy = _diff_matrix(H, h)
    return (sp.kron(sp.identity(H), dx @ dx) + sp.kron(dy @ dy, sp.identity(W))).tocsr()


# -- cross-entropy ----------------------------------------------------------


def ce_loss(pred_dists, target_tokens, pad_mask=None) -> float:
    """Token cross-entropy: mean over non-PAD positions per sequence, then over the batch.

    ``pred_dists`` is (N, L, V) probabilities, ``target_tokens`` (N, L)
    indices. ``pad_mask`` marks positions to *keep*; by default every
    position whose target is not PAD.
    """
    p = np.asarray(pred_dists, dtype=np.float64)
    t = np.asarray(target_tokens)
    if p.ndim != 3 or t.shape != p.shape[:2]:
        raise ShapeError(f"ce_loss expects (N, L, V) and (N, L); got {p.shape} and {t.shape}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("predicted distributions must sum to 1")
    if np.any(t < 0) or np.any(t >= p.shape[2]):
        raise IndexError("target token outside vocabulary")
    keep = (t != PAD) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    picked = np.take_along_axis(p, t[..., None].astype(np.int64), axis=-1)[..., 0]
    nll = -np.log(np.maximum(picked, PROB_FLOOR))
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("sequence with no scored positions")
    return float(np.mean((nll * keep).sum(axis=1) / counts))


# -- combination ----------------------------------------------------------------


def total_loss(parts: Mapping[str, float], w: LossWeights = LossWeights()) -> LossReport:
    vals = {}
    for key in ("con", "mse", "ce", "phy"):
        v = float(parts.get(key, 0.0))
        if not math.isfinite(v):
            raise ValueError(f"loss term {key} is not finite: {v}")
        vals[key] = v
    total = (
        w.lambda_con * vals["con"]
        + w.lambda_mse * vals["mse"]
        + w.lambda_ce * vals["ce"]
        + w.lambda_phy * vals["phy"]
    )
    return LossReport(total=total, **vals)
