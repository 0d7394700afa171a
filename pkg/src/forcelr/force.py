"""Force Regularization gradients and the pairwise-distance regularizers they relate to.

Each filter row ``W_i`` is normalized to ``w_i`` on the unit sphere.  Every
other filter pulls on it with a pairwise force ``f_ji = f(w_j - w_i)``; the
regularization gradient is the component of the summed force tangent to the
sphere at ``w_i``, scaled by ``||W_i||`` so the angular step does not depend on
the filter's length.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .filters import EPS_NORM, FilterMatrix, _as_matrix, normalize_rows


class ForceKind(str, enum.Enum):
    L2 = "l2"
    L1 = "l1"


class Scaler(str, enum.Enum):
    LENGTH = "length"
    RECIPROCAL = "reciprocal"


class DegenerateFilterError(ValueError):
    pass


@dataclass(frozen=True)
class ForceConfig:
    kind: ForceKind = ForceKind.L2
    lambda_s: float = 0.0
    eps_dist: float = 1e-8
    eps_norm: float = EPS_NORM
    # ``reciprocal`` exists only to reproduce the step-size scaler comparison
    scaler: Scaler = Scaler.LENGTH

    def __post_init__(self):
        object.__setattr__(self, "kind", ForceKind(self.kind))
        object.__setattr__(self, "scaler", Scaler(self.scaler))
        if not np.isfinite(self.lambda_s):
            raise ValueError("lambda_s must be finite")
        if self.eps_dist <= 0 or self.eps_norm <= 0:
            raise ValueError("eps_dist and eps_norm must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "lambda_s": self.lambda_s, "eps_dist": self.eps_dist,
                "eps_norm": self.eps_norm, "scaler": self.scaler.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ForceConfig":
        return cls(**d)


@dataclass
class ForceGradient:
    delta: np.ndarray
    perp_residuals: np.ndarray


def pairwise_force(w_i, w_j, kind=ForceKind.L2, eps_dist: float = 1e-8) -> np.ndarray:
    diff = np.asarray(w_j, dtype=np.float64) - np.asarray(w_i, dtype=np.float64)
    if ForceKind(kind) is ForceKind.L2:
        return diff
    dist = np.linalg.norm(diff)
    if dist < eps_dist:
        return np.zeros_like(diff)
    return diff / dist


def _summed_forces(unit: np.ndarray, active: np.ndarray, kind: ForceKind,
                   eps_dist: float) -> np.ndarray:
    n = unit.shape[0]
    total = np.zeros_like(unit)
    if kind is ForceKind.L2:
        # sum_j (w_j - w_i) over active j, accumulated in index order
        s = np.zeros(unit.shape[1])
        for j in range(n):
            if active[j]:
                s += unit[j]
        count = int(active.sum())
        total[active] = s - count * unit[active]
        return total
    for i in range(n):
        if not active[i]:
            continue
        diff = unit - unit[i]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        use = active & (dist >= eps_dist)
        acc = np.zeros(unit.shape[1])
        for j in np.flatnonzero(use):
            acc += diff[j] / dist[j]
        total[i] = acc
    return total


def force_gradient(mat, cfg: ForceConfig) -> ForceGradient:
    """Regularization gradient ``Delta W`` for every filter row.

    Row ``i`` is ``s_i * (S_i - (S_i . w_i) w_i)`` with ``S_i = sum_j f_ji`` and
    ``s_i = ||W_i||`` (or ``1/||W_i||`` for the reciprocal scaler).  Filters
    shorter than ``cfg.eps_norm`` neither feel nor exert force.
    """
    data = _as_matrix(mat)
    norm = normalize_rows(data, cfg.eps_norm)
    active = ~norm.degenerate_mask
    unit = norm.unit_rows
    s = _summed_forces(unit, active, cfg.kind, cfg.eps_dist)
    radial = np.einsum("ij,ij->i", s, unit)
    tangent = s - radial[:, None] * unit
    if cfg.scaler is Scaler.LENGTH:
        scale = norm.lengths
    else:
        scale = np.zeros_like(norm.lengths)
        scale[active] = 1.0 / norm.lengths[active]
    delta = np.where(active[:, None], scale[:, None] * tangent, 0.0)
    perp = np.abs(np.einsum("ij,ij->i", delta, unit))
    return ForceGradient(delta, perp)


def _require_nondegenerate(data: np.ndarray, eps_norm: float):
    norm = normalize_rows(data, eps_norm)
    if norm.degenerate_mask.any():
        bad = np.flatnonzero(norm.degenerate_mask).tolist()
        raise DegenerateFilterError(f"undefined normalized distance: degenerate rows {bad}")
    return norm


def reference_regularizer(mat, kind=ForceKind.L2, ordered: bool = False,
                          eps_norm: float = EPS_NORM) -> float:
    """Sum of pairwise distances between normalized filters.

    ``l2``: ``1/2 * sum ||w_j - w_i||^2``; ``l1``: ``sum ||w_j - w_i||``.  By
    default each unordered pair is counted once, which makes
    ``force_gradient = ||W_i||^2 * (-grad)`` hold exactly.  ``ordered=True``
    sums over all ordered pairs ``(i, j)`` and doubles the value.
    """
    kind = ForceKind(kind)
    unit = _require_nondegenerate(_as_matrix(mat), eps_norm).unit_rows
    n = unit.shape[0]
    total = 0.0
    for i in range(n):
        diff = unit[i + 1:] - unit[i]
        sq = np.einsum("ij,ij->i", diff, diff)
        total += 0.5 * sq.sum() if kind is ForceKind.L2 else np.sqrt(sq).sum()
    return 2.0 * total if ordered else total


def reference_regularizer_gradient(mat, kind=ForceKind.L2, ordered: bool = False,
                                   eps_dist: float = 1e-8,
                                   eps_norm: float = EPS_NORM) -> np.ndarray:
    """Analytic gradient of :func:`reference_regularizer` with respect to the raw rows.

    Uses the normalization Jacobian ``G_i = (I - w_i^T w_i) / ||W_i||``, so
    ``-dR/dW_i = (S_i - (S_i . w_i) w_i) / ||W_i||``.
    """
    kind = ForceKind(kind)
    norm = _require_nondegenerate(_as_matrix(mat), eps_norm)
    unit = norm.unit_rows
    active = np.ones(unit.shape[0], dtype=bool)
    s = _summed_forces(unit, active, kind, eps_dist)
    radial = np.einsum("ij,ij->i", s, unit)
    neg_grad = (s - radial[:, None] * unit) / norm.lengths[:, None]
    if ordered:
        neg_grad = 2.0 * neg_grad
    return -neg_grad


def apply_update(weights, data_loss_grad, force: ForceGradient | np.ndarray,
                 eta: float, lambda_s: float):
    """One SGD step ``W <- W - eta * (dE/dW - lambda_s * Delta W)``."""
    w = _as_matrix(weights)
    g = np.asarray(data_loss_grad, dtype=np.float64)
    delta = force.delta if isinstance(force, ForceGradient) else np.asarray(force, dtype=np.float64)
    if not (w.shape == g.shape == delta.shape):
        raise ValueError(
            f"shape mismatch: weights {w.shape}, loss grad {g.shape}, force {delta.shape}"
        )
    if eta <= 0:
        raise ValueError("eta must be positive")
    out = w - eta * (g - lambda_s * delta)
    if isinstance(weights, FilterMatrix):
        return FilterMatrix(out, source=weights.source)
    return out


def mean_pairwise_cosine(mat, eps_norm: float = EPS_NORM) -> float:
    """Average cosine similarity over distinct pairs of non-degenerate filters."""
    norm = normalize_rows(_as_matrix(mat), eps_norm)
    unit = norm.unit_rows[~norm.degenerate_mask]
    n = unit.shape[0]
    if n < 2:
        return 0.0
    gram = unit @ unit.T
    return float((gram.sum() - np.trace(gram)) / (n * (n - 1)))
