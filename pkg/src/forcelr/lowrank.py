"""Cross-filter low-rank approximation of convolutional layers.

Every filter is approximated as a linear combination of ``M`` basis filters,
``W ~ b @ B`` with ``b`` of shape ``N x M`` and ``B`` of shape ``M x D``.  The
layer then splits into a convolution with the ``M`` basis filters followed by
a 1x1 convolution that mixes the ``M`` basis responses.
"""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .filters import (FilterBank, FilterMatrix, _as_matrix, covariance, group_matrices,
                      psd_tolerance, sym_eigen)
from .rng import make_rng


class Method(str, enum.Enum):
    PCA = "pca"
    SVD = "svd"
    KMEANS = "kmeans"


@dataclass
class LowRankFactorization:
    method: Method
    rank: int
    basis: np.ndarray
    combination: np.ndarray
    spectrum: np.ndarray
    reconstruction_error_pct: float

    def reconstruct(self) -> np.ndarray:
        return self.combination @ self.basis


@dataclass
class DecomposedLayer:
    basis_layer: FilterBank
    combine_layer: FilterBank


def _check_rank(data: np.ndarray, rank: int):
    n = data.shape[0]
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {rank}")


def relative_error(data: np.ndarray, approx: np.ndarray) -> float:
    """Squared Frobenius error as a fraction of the squared Frobenius norm."""
    total = float(np.sum(data * data))
    if total < 1e-15:
        return 0.0
    r = data - approx
    return float(np.sum(r * r)) / total


# eigenvalues below this fraction of the total energy are rounding noise
SPECTRUM_FLOOR = 1e-12


def error_curve_from_spectrum(spectrum) -> np.ndarray:
    """``e_M / e_0`` for ``M = 1..N`` where ``e_M`` sums the eigenvalues past the M-th."""
    vals = np.clip(np.asarray(spectrum, dtype=np.float64), 0.0, None)
    e0 = vals.sum()
    n = vals.size
    if e0 < 1e-15:
        return np.zeros(n)
    vals = np.where(vals <= SPECTRUM_FLOOR * e0, 0.0, vals)
    # tails[k] = sum(vals[k:]) accumulated from the small end
    tails = np.cumsum(vals[::-1])[::-1]
    curve = np.empty(n)
    curve[:-1] = tails[1:] / e0
    curve[-1] = 0.0
    return curve


def rank_from_curve(curve, tau: float) -> int:
    curve = np.asarray(curve, dtype=np.float64)
    hits = np.flatnonzero(curve <= tau)
    return int(hits[0]) + 1 if hits.size else curve.size


def select_rank(spectrum, tau: float = 0.05) -> int:
    """Smallest ``M`` whose reconstruction-error fraction is at most ``tau``."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    vals = np.clip(np.asarray(spectrum, dtype=np.float64), 0.0, None)
    if vals.sum() < 1e-15:
        return 1
    return rank_from_curve(error_curve_from_spectrum(vals), tau)


def pca_spectrum(mat) -> tuple[np.ndarray, np.ndarray]:
    cov = covariance(mat)
    eig = sym_eigen(cov, psd_tol=psd_tolerance(cov))
    return eig.eigenvalues, eig.eigenvectors


def pca_factorize(mat, rank: int) -> LowRankFactorization:
    data = _as_matrix(mat)
    _check_rank(data, rank)
    vals, vecs = pca_spectrum(data)
    p = vecs[:, :rank]
    basis = p.T @ data
    err = float(error_curve_from_spectrum(vals)[rank - 1])
    return LowRankFactorization(Method.PCA, rank, basis, p.copy(), vals, err)


def svd_factorize(mat, rank: int) -> LowRankFactorization:
    data = _as_matrix(mat)
    _check_rank(data, rank)
    try:
        u, s, vt = np.linalg.svd(data, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"SVD did not converge: {exc}") from exc
    n = data.shape[0]
    sq = np.zeros(n)
    sq[:s.size] = s * s
    basis = s[:rank, None] * vt[:rank]
    comb = u[:, :rank].copy()
    if rank > s.size:
        # wide rank on a short matrix: pad with zero basis rows
        basis = np.vstack([basis, np.zeros((rank - s.size, data.shape[1]))])
        comb = np.hstack([comb, np.zeros((n, rank - s.size))])
    err = float(error_curve_from_spectrum(sq)[rank - 1])
    return LowRankFactorization(Method.SVD, rank, basis, comb, sq, err)


def _sqdist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sqdist(x, x[chosen])[:, 0]
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            nxt = next(i for i in range(n) if i not in chosen)
        else:
            cdf = np.cumsum(d2 / total)
            nxt = int(np.searchsorted(cdf, rng.random(), side="right"))
            nxt = min(nxt, n - 1)
            while d2[nxt] == 0.0:
                nxt = (nxt + 1) % n
        chosen.append(nxt)
        d2 = np.minimum(d2, _sqdist(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int):
    centers = centers.copy()
    k = centers.shape[0]
    labels = None
    for _ in range(max_iters):
        d2 = _sqdist(x, centers)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=k)
        for m in np.flatnonzero(counts == 0):
            # empty cluster: take the point farthest from its current centroid
            own = d2[np.arange(x.shape[0]), new]
            movable = counts[new] > 1
            far = int(np.argmax(np.where(movable, own, -1.0)))
            counts[new[far]] -= 1
            new[far] = m
            counts[m] = 1
            d2[far] = 0.0
        for m in range(k):
            centers[m] = x[new == m].mean(axis=0)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    labels = np.argmin(_sqdist(x, centers), axis=1)
    return centers, labels


def _kmeans_cost(x, centers, labels):
    r = x - centers[labels]
    return float(np.sum(r * r))


_KMEANS_CACHE: dict = {}


def _kmeans_solution(x: np.ndarray, k: int, seed: int, max_iters: int):
    key = (x.shape, x.tobytes(), k, seed, max_iters)
    if key in _KMEANS_CACHE:
        return _KMEANS_CACHE[key]
    rng = make_rng(seed, "kmeans", k)
    centers, labels = _lloyd(x, _kmeanspp(x, k, rng), max_iters)
    if k > 1:
        # warm start from the (k-1)-cluster answer plus its worst-fit point;
        # its cost never exceeds the smaller solution, so errors fall with k
        prev_c, prev_l = _kmeans_solution(x, k - 1, seed, max_iters)
        resid = np.einsum("ij,ij->i", x - prev_c[prev_l], x - prev_c[prev_l])
        warm = np.vstack([prev_c, x[int(np.argmax(resid))]])
        wc, wl = _lloyd(x, warm, max_iters)
        if _kmeans_cost(x, wc, wl) < _kmeans_cost(x, centers, labels):
            centers, labels = wc, wl
    _KMEANS_CACHE[key] = (centers, labels)
    if len(_KMEANS_CACHE) > 4096:
        _KMEANS_CACHE.pop(next(iter(_KMEANS_CACHE)))
    return centers, labels


def kmeans_factorize(mat, rank: int, seed: int = 0, max_iters: int = 100) -> LowRankFactorization:
    """Approximate each filter by the centroid of its cluster (one-hot combination)."""
    data = _as_matrix(mat)
    _check_rank(data, rank)
    centers, labels = _kmeans_solution(data, rank, seed, max_iters)
    comb = np.zeros((data.shape[0], rank))
    comb[np.arange(data.shape[0]), labels] = 1.0
    err = relative_error(data, centers[labels])
    return LowRankFactorization(Method.KMEANS, rank, centers.copy(), comb, np.empty(0), err)


def factorize(mat, rank: int, method=Method.PCA, seed: int = 0) -> LowRankFactorization:
    method = Method(method)
    if method is Method.PCA:
        return pca_factorize(mat, rank)
    if method is Method.SVD:
        return svd_factorize(mat, rank)
    return kmeans_factorize(mat, rank, seed=seed)


def error_curve(mat, method=Method.PCA, seed: int = 0) -> np.ndarray:
    """``e_M / e_0`` for every ``M = 1..N`` under the given method."""
    method = Method(method)
    data = _as_matrix(mat)
    if method is Method.PCA:
        return error_curve_from_spectrum(pca_spectrum(data)[0])
    if method is Method.SVD:
        return error_curve_from_spectrum(svd_factorize(data, 1).spectrum)
    return np.array([kmeans_factorize(data, m, seed).reconstruction_error_pct
                     for m in range(1, data.shape[0] + 1)])


def layer_rank(mat, tau: float = 0.05) -> int:
    return select_rank(pca_spectrum(mat)[0], tau)


def split_layer(bank: FilterBank, fact) -> DecomposedLayer:
    """Turn one convolution into basis convolution + 1x1 combination.

    ``fact`` is a single factorization, or one per group for grouped layers; all
    groups must share the same rank.
    """
    facts = list(fact) if isinstance(fact, (list, tuple)) else [fact]
    if len(facts) != bank.groups:
        raise ValueError(f"need {bank.groups} factorizations, got {len(facts)}")
    ranks = {f.rank for f in facts}
    if len(ranks) != 1:
        raise ValueError(f"grouped split needs one rank per layer, got {sorted(ranks)}")
    m = ranks.pop()
    per = bank.n_filters // bank.groups
    for f in facts:
        if f.basis.shape != (m, bank.filter_size) or f.combination.shape != (per, m):
            raise ValueError(
                f"factorization shapes {f.basis.shape}/{f.combination.shape} do not match "
                f"bank {bank.shape} with groups={bank.groups}"
            )
    basis = np.vstack([f.basis for f in facts])
    comb = np.vstack([f.combination for f in facts])
    return DecomposedLayer(
        FilterBank(basis.reshape(-1), m * bank.groups, bank.channels, bank.height, bank.width,
                   bank.groups),
        FilterBank(comb.reshape(-1), bank.n_filters, m, 1, 1, bank.groups),
    )


def layer_macs(n, c, h, w, h_out, w_out) -> int:
    return n * c * h * w * h_out * w_out


def decomposed_macs(n, c, h, w, h_out, w_out, m) -> int:
    return m * c * h * w * h_out * w_out + n * m * h_out * w_out


def theoretical_speedup(n, c, h, w, h_out, w_out, m) -> float:
    if min(n, c, h, w, h_out, w_out, m) <= 0:
        raise ValueError("all dimensions must be positive")
    return layer_macs(n, c, h, w, h_out, w_out) / decomposed_macs(n, c, h, w, h_out, w_out, m)


def break_even_rank(n, c, h, w) -> float:
    """Rank below which the split layer costs fewer multiply-accumulates."""
    chw = c * h * w
    return n * chw / (chw + n)


@dataclass
class LayerRank:
    layer: str
    full_rank: int
    rank: int
    rank_ratio: float
    tau: float
    theoretical_speedup: float
    break_even_rank: float
    error_curve: list = field(default_factory=list)


@dataclass
class RankReport:
    per_layer: list

    def to_json(self) -> str:
        return json.dumps({"per_layer": [asdict(r) for r in self.per_layer]}, indent=2,
                          sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "N", "M", "rank_ratio", "tau", "theoretical_speedup"])
        for r in self.per_layer:
            w.writerow([r.layer, r.full_rank, r.rank, f"{r.rank_ratio:.6f}", r.tau,
                        f"{r.theoretical_speedup:.6f}"])
        return buf.getvalue()


def analyze_bank(name: str, bank: FilterBank, out_hw: tuple[int, int], tau: float = 0.05,
                 method=Method.PCA, seed: int = 0) -> list[LayerRank]:
    """Rank entries for one layer, one per group when the layer is grouped."""
    mats = group_matrices(bank)
    rows = []
    for g, mat in enumerate(mats):
        curve = error_curve(mat, method, seed)
        vals_sum = float(np.sum(mat.data * mat.data))
        m = 1 if vals_sum < 1e-15 else rank_from_curve(curve, tau)
        n = mat.rows
        label = name if len(mats) == 1 else f"{name}/g{g}"
        rows.append(LayerRank(
            layer=label, full_rank=n, rank=m, rank_ratio=m / n, tau=tau,
            theoretical_speedup=theoretical_speedup(n, bank.channels, bank.height, bank.width,
                                                    out_hw[0], out_hw[1], m),
            break_even_rank=break_even_rank(n, bank.channels, bank.height, bank.width),
            error_curve=[float(v) for v in curve],
        ))
    return rows


__all__ = [
    "Method", "LowRankFactorization", "DecomposedLayer", "LayerRank", "RankReport",
    "pca_factorize", "svd_factorize", "kmeans_factorize", "factorize", "error_curve",
    "error_curve_from_spectrum", "select_rank", "rank_from_curve", "layer_rank", "split_layer",
    "theoretical_speedup", "break_even_rank", "layer_macs", "decomposed_macs", "analyze_bank",
    "relative_error", "FilterMatrix",
]
