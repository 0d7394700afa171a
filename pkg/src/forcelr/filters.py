"""Filter-bank representations and the small amount of linear algebra they need.

A convolutional layer's weights ``N x C x H x W`` are handled as an
``N x (C*H*W)`` matrix whose rows are flattened filters in channel-major
``(c, h, w)`` order.  Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS_NORM = 1e-12


class DegenerateDivisorError(ValueError):
    pass


class EigenConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"Jacobi eigensolver did not converge after {sweeps} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


@dataclass
class FilterBank:
    """Weights of one convolutional layer, ``n_filters x channels x height x width``.

    ``channels`` is the number of input channels seen by each filter, i.e. the
    per-group count when ``groups > 1``.
    """

    data: np.ndarray
    n_filters: int
    channels: int
    height: int
    width: int
    groups: int = 1

    def __post_init__(self):
        dims = (self.n_filters, self.channels, self.height, self.width, self.groups)
        if any(int(d) != d or d < 1 for d in dims):
            raise ValueError(f"filter bank dimensions must be positive integers, got {dims}")
        size = self.n_filters * self.channels * self.height * self.width
        if size > np.iinfo(np.intp).max:
            raise OverflowError(f"filter bank of {size} elements is not addressable")
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.size != size:
            raise ValueError(f"data has {self.data.size} entries, expected N*C*H*W = {size}")
        if self.n_filters % self.groups:
            raise ValueError(f"{self.n_filters} filters cannot be split into {self.groups} groups")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("filter bank contains non-finite weights")

    @classmethod
    def from_array(cls, weights, groups: int = 1) -> "FilterBank":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 4:
            raise ValueError(f"expected a 4-D weight tensor, got shape {weights.shape}")
        n, c, h, w = weights.shape
        return cls(weights.reshape(-1), n, c, h, w, groups)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n_filters, self.channels, self.height, self.width)

    @property
    def filter_size(self) -> int:
        return self.channels * self.height * self.width

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


@dataclass
class FilterMatrix:
    data: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"filter matrix must be 2-D, got shape {self.data.shape}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass
class NormalizedFilters:
    unit_rows: np.ndarray
    lengths: np.ndarray
    degenerate_mask: np.ndarray


@dataclass
class EigenDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = field(default=0, compare=False)


def _as_matrix(mat) -> np.ndarray:
    if isinstance(mat, FilterMatrix):
        return mat.data
    return np.asarray(mat, dtype=np.float64)


def reshape_to_matrix(bank: FilterBank, group: int | None = None) -> FilterMatrix:
    """Flatten each filter into one row.

    With ``group`` set, only the rows of that filter group are returned; grouped
    layers are analysed one group at a time.
    """
    rows = bank.data.reshape(bank.n_filters, bank.filter_size)
    source = "filterbank:{}x{}x{}x{}".format(*bank.shape)
    if group is not None:
        if not 0 <= group < bank.groups:
            raise IndexError(f"group {group} out of range for {bank.groups} groups")
        per = bank.n_filters // bank.groups
        rows = rows[group * per:(group + 1) * per]
        source += f"/g{group}"
    return FilterMatrix(rows.copy(), source=source)


def group_matrices(bank: FilterBank) -> list[FilterMatrix]:
    return [reshape_to_matrix(bank, g) for g in range(bank.groups)] if bank.groups > 1 \
        else [reshape_to_matrix(bank)]


def matrix_to_bank(mat, channels: int, height: int, width: int, groups: int = 1) -> FilterBank:
    data = _as_matrix(mat)
    if data.shape[1] != channels * height * width:
        raise ValueError(
            f"matrix has {data.shape[1]} columns, cannot hold {channels}x{height}x{width} filters"
        )
    return FilterBank(data.reshape(-1).copy(), data.shape[0], channels, height, width, groups)


def normalize_rows(mat, eps_norm: float = EPS_NORM) -> NormalizedFilters:
    data = _as_matrix(mat)
    lengths = np.sqrt(np.einsum("ij,ij->i", data, data))
    degenerate = lengths < eps_norm
    unit = np.zeros_like(data)
    ok = ~degenerate
    unit[ok] = data[ok] / lengths[ok, None]
    return NormalizedFilters(unit, lengths, degenerate)


def covariance(mat) -> np.ndarray:
    """Uncentered filter covariance ``W W^T / (D - 1)``.

    No mean is subtracted; rank numbers in the literature built on this
    estimator depend on that.
    """
    data = _as_matrix(mat)
    d = data.shape[1]
    if d < 2:
        raise DegenerateDivisorError("degenerate divisor: covariance needs at least 2 columns")
    cov = data @ data.T / (d - 1)
    # exact symmetry, independent of how the product was accumulated
    return 0.5 * (cov + cov.T)


def sym_eigen(a, tol: float = 1e-14, max_sweeps: int = 60,
              psd_tol: float | None = None) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of a real symmetric matrix.

    Rotations are applied in a fixed ``(p, q)`` order, so results are bitwise
    reproducible.  Converges when the off-diagonal Frobenius norm falls below
    ``tol * ||A||_F``.  Eigenvalues come back sorted in descending order; if
    ``psd_tol`` is given, negative eigenvalues no smaller than ``-psd_tol`` are
    clamped to zero.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    scale = np.linalg.norm(a)
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(scale, 1.0):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    target = tol * scale

    def off_norm():
        return np.linalg.norm(a[~np.eye(n, dtype=bool)])

    sweeps = 0
    off = off_norm()
    while off > target:
        if sweeps >= max_sweeps:
            raise EigenConvergenceError(off, sweeps)
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 * max(abs(a[p, p]), abs(a[q, q]), 1.0):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        off = off_norm()

    vals = np.diag(a).copy()
    # stable sort on -vals keeps ties in index order
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = v[:, order]
    # fix the sign of each eigenvector: largest-magnitude entry positive
    pivots = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivots, np.arange(n)])
    signs[signs == 0] = 1.0
    vecs = vecs * signs
    if psd_tol is not None:
        vals = np.where((vals < 0) & (vals >= -psd_tol), 0.0, vals)
    return EigenDecomposition(vals, vecs, sweeps)


def psd_tolerance(a) -> float:
    return 1e-9 * max(float(np.trace(a)), 0.0)
