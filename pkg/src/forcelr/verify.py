"""Seeded numerical property checks for the regularizer, the factorizations and the layers.

Each check returns a :class:`Check` carrying the worst residual it saw.  The
oracles used here (finite differences, nested-loop convolution, brute-force
sums) are deliberately naive and share no code with the paths they test.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .filters import FilterBank
from .force import ForceConfig, force_gradient, reference_regularizer, reference_regularizer_gradient
from .lowrank import (break_even_rank, kmeans_factorize, pca_factorize, split_layer,
                      svd_factorize, theoretical_speedup)
from .nn import layers as L
from .rng import make_rng


@dataclass
class Check:
    name: str
    passed: bool
    worst: float
    threshold: float
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status}  {self.name:<28} worst={self.worst:.3e}  limit={self.threshold:.1e}  " \
               f"({self.seconds:.2f}s)"
        if "min_cosine" in self.detail:
            text += f"  min_cosine={self.detail['min_cosine']:.6f}"
        return text

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        chk = fn(*args, **kwargs)
        chk.seconds = time.perf_counter() - t0
        return chk
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _random_matrix(rng, n, d):
    return rng.standard_normal((n, d)) * rng.uniform(0.2, 3.0, size=(n, 1))


def _default_force(mat, kind):
    return force_gradient(mat, ForceConfig(kind, 1.0)).delta


@_timed
def check_perpendicular(instances: int = 1000, seed: int = 1, force_fn=_default_force) -> Check:
    """``|dW_i . w_i| / (1 + ||dW_i||)`` over random instances, both force kinds."""
    rng = make_rng(seed, "verify-perp")
    worst = 0.0
    for _ in range(instances):
        n, d = int(rng.integers(2, 33)), int(rng.integers(4, 65))
        mat = _random_matrix(rng, n, d)
        unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        for kind in ("l2", "l1"):
            delta = force_fn(mat, kind)
            r = np.abs(np.sum(delta * unit, axis=1)) / (1 + np.linalg.norm(delta, axis=1))
            worst = max(worst, float(r.max()))
    return Check("perpendicularity", worst <= 1e-9, worst, 1e-9)


def _distinct_instance(rng, min_dist=1e-3):
    while True:
        n, d = int(rng.integers(2, 17)), int(rng.integers(3, 33))
        mat = _random_matrix(rng, n, d)
        unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        diff = unit[:, None] - unit[None]
        dist = np.sqrt((diff ** 2).sum(-1)) + np.eye(n)
        if dist.min() > min_dist:
            return mat


@_timed
def check_force_scale_l2(instances: int = 200, seed: int = 2, force_fn=_default_force) -> Check:
    """``||dW_i - ||W_i||^2 (-dR/dW_i)|| <= 1e-10 (1 + ||dW_i||)`` for the l2 force."""
    rng = make_rng(seed, "verify-scale-l2")
    worst, min_cos = 0.0, 1.0
    for _ in range(instances):
        mat = _distinct_instance(rng)
        delta = force_fn(mat, "l2")
        neg_grad = -reference_regularizer_gradient(mat, "l2")
        sq = np.sum(mat * mat, axis=1, keepdims=True)
        r = np.linalg.norm(delta - sq * neg_grad, axis=1) / (1 + np.linalg.norm(delta, axis=1))
        worst = max(worst, float(r.max()))
        nd, ng = np.linalg.norm(delta, axis=1), np.linalg.norm(neg_grad, axis=1)
        ok = (nd > 1e-12) & (ng > 1e-12)
        if ok.any():
            cos = np.sum(delta[ok] * neg_grad[ok], axis=1) / (nd[ok] * ng[ok])
            min_cos = min(min_cos, float(cos.min()))
    return Check("force_scale_l2", worst <= 1e-10, worst, 1e-10, detail={"min_cosine": min_cos})


@_timed
def check_force_direction_l1(instances: int = 200, seed: int = 3, force_fn=_default_force) -> Check:
    """Cosine between the l1 force and ``-dR_l1/dW_i`` is 1 up to 1e-8."""
    rng = make_rng(seed, "verify-direction-l1")
    worst, ratios, min_cos = 0.0, [], 1.0
    for _ in range(instances):
        mat = _distinct_instance(rng)
        delta = force_fn(mat, "l1")
        neg_grad = -reference_regularizer_gradient(mat, "l1")
        nd, ng = np.linalg.norm(delta, axis=1), np.linalg.norm(neg_grad, axis=1)
        ok = (nd > 1e-12) & (ng > 1e-12)
        cos = np.sum(delta[ok] * neg_grad[ok], axis=1) / (nd[ok] * ng[ok])
        if cos.size:
            worst = max(worst, float(np.max(1.0 - cos)))
            min_cos = min(min_cos, float(cos.min()))
        sq = np.sum(mat[ok] ** 2, axis=1)
        ratios.extend((nd[ok] / ng[ok] / sq).tolist())
    ratios = np.asarray(ratios)
    return Check("force_direction_l1", worst <= 1e-8, worst, 1e-8,
                 detail={"min_cosine": min_cos, "ratio_over_sq_norm_min": float(ratios.min()),
                         "ratio_over_sq_norm_max": float(ratios.max())})


def _fd_grad(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def layer_gradient_residuals(seed: int = 5) -> dict:
    """Finite-difference relative errors of every layer's backward pass on toy shapes."""
    rng = make_rng(seed, "verify-layers")
    h = 1e-5
    out = {}

    # conv: sampled coordinates of input and weight, full bias
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in ((1, 0), (2, 1)):
        y, cache = L.conv2d_forward(x, w, b, stride, pad)
        proj = rng.standard_normal(y.shape)
        dx, dw, db = L.conv2d_backward(proj, cache)

        def fx(xx):
            return float(np.sum(L.conv2d_forward(xx, w, b, stride, pad)[0] * proj))

        def fw(ww):
            return float(np.sum(L.conv2d_forward(x, ww, b, stride, pad)[0] * proj))

        def fb(bb):
            return float(np.sum(L.conv2d_forward(x, w, bb, stride, pad)[0] * proj))

        worst = 0.0
        for arr, grad, f in ((x, dx, fx), (w, dw, fw)):
            for _ in range(20):
                idx = tuple(int(rng.integers(s)) for s in arr.shape)
                xp, xm = arr.copy(), arr.copy()
                xp[idx] += h
                xm[idx] -= h
                fd = (f(xp) - f(xm)) / (2 * h)
                worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-3))
        worst = max(worst, _rel(db, _fd_grad(fb, b, h)))
        out[f"conv_s{stride}_p{pad}"] = worst

    # grouped conv, exhaustive weights
    xg = rng.standard_normal((1, 4, 5, 5))
    wg = rng.standard_normal((4, 2, 3, 3))
    y, cache = L.conv2d_forward(xg, wg, None, 1, 1, groups=2)
    proj = rng.standard_normal(y.shape)
    dxg, dwg, _ = L.conv2d_backward(proj, cache)
    out["conv_grouped"] = max(
        _rel(dwg, _fd_grad(lambda ww: float(np.sum(L.conv2d_forward(xg, ww, None, 1, 1, 2)[0] * proj)), wg, h)),
        _rel(dxg, _fd_grad(lambda xx: float(np.sum(L.conv2d_forward(xx, wg, None, 1, 1, 2)[0] * proj)), xg, h)),
    )

    # dense, exhaustive
    xd = rng.standard_normal((3, 2, 2, 2))
    wd = rng.standard_normal((5, 8))
    bd = rng.standard_normal(5)
    y, cache = L.dense_forward(xd, wd, bd)
    proj = rng.standard_normal(y.shape)
    dxd, dwd, dbd = L.dense_backward(proj, cache)
    out["dense"] = max(
        _rel(dxd, _fd_grad(lambda v: float(np.sum(L.dense_forward(v, wd, bd)[0] * proj)), xd, h)),
        _rel(dwd, _fd_grad(lambda v: float(np.sum(L.dense_forward(xd, v, bd)[0] * proj)), wd, h)),
        _rel(dbd, _fd_grad(lambda v: float(np.sum(L.dense_forward(xd, wd, v)[0] * proj)), bd, h)),
    )

    # relu and maxpool, with inputs kept away from kinks and ties
    xr = rng.uniform(0.1, 1.0, size=(2, 2, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 2, 4, 4))
    y, mask = L.relu_forward(xr)
    proj = rng.standard_normal(y.shape)
    out["relu"] = _rel(L.relu_backward(proj, mask),
                       _fd_grad(lambda v: float(np.sum(L.relu_forward(v)[0] * proj)), xr, h))
    xp_ = rng.permutation(np.arange(2 * 2 * 4 * 4, dtype=np.float64)).reshape(2, 2, 4, 4) * 0.1
    y, cache = L.maxpool_forward(xp_, 2, 2)
    proj = rng.standard_normal(y.shape)
    out["maxpool"] = _rel(L.maxpool_backward(proj, cache),
                          _fd_grad(lambda v: float(np.sum(L.maxpool_forward(v, 2, 2)[0] * proj)), xp_, h))

    # softmax cross-entropy
    z = rng.standard_normal((4, 3))
    lab = np.array([0, 2, 1, 2])
    _, gz = L.softmax_cross_entropy(z, lab)
    out["softmax_xent"] = _rel(gz, _fd_grad(lambda v: L.softmax_cross_entropy(v, lab)[0], z, h))
    return out


@_timed
def check_regularizer_gradient(instances: int = 20, seed: int = 4) -> Check:
    """Analytic regularizer gradient vs central differences with ``h = 1e-6``."""
    rng = make_rng(seed, "verify-fd")
    worst = 0.0
    for k in range(instances):
        kind = "l2" if k % 2 == 0 else "l1"
        while True:
            mat = _random_matrix(rng, 4, 6)
            unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
            dist = np.sqrt(((unit[:, None] - unit[None]) ** 2).sum(-1)) + np.eye(4)
            if dist.min() > 1e-3:
                break
        analytic = reference_regularizer_gradient(mat, kind)
        fd = _fd_grad(lambda m: reference_regularizer(m, kind), mat, 1e-6)
        worst = max(worst, _rel(analytic, fd))
    return Check("regularizer_gradient_fd", worst <= 1e-5, worst, 1e-5)


@_timed
def check_layer_gradients() -> Check:
    """Every layer's backward pass vs central differences with ``h = 1e-5``."""
    layers = layer_gradient_residuals()
    worst = max(layers.values())
    return Check("layer_backward_fd", worst <= 1e-4, worst, 1e-4, detail=layers)


@_timed
def check_pca_tail(instances: int = 50, seed: int = 6) -> Check:
    """``||W - P P^T W||_F^2 == (D - 1) * sum_{i>M} lambda_i`` for every M."""
    rng = make_rng(seed, "verify-tail")
    worst = 0.0
    for _ in range(instances):
        mat = rng.standard_normal((8, 18))
        for m in range(1, 9):
            f = pca_factorize(mat, m)
            err = float(np.sum((mat - f.reconstruct()) ** 2))
            tail = 17.0 * float(np.sum(f.spectrum[m:]))
            scale = max(abs(tail), 1e-12 * float(np.sum(mat * mat)))
            worst = max(worst, abs(err - tail) / scale)
    return Check("pca_tail_identity", worst <= 1e-8, worst, 1e-8)


@_timed
def check_pca_svd_kmeans(instances: int = 100, seed: int = 7) -> Check:
    """PCA and truncated SVD give the same error curve; k-means is never better."""
    rng = make_rng(seed, "verify-pca-svd")
    worst, kmeans_violation = 0.0, 0.0
    for k in range(instances):
        n = 8
        mat = rng.standard_normal((n, 18))
        total = float(np.sum(mat * mat))
        for m in range(1, n + 1):
            ep = float(np.sum((mat - pca_factorize(mat, m).reconstruct()) ** 2))
            es = float(np.sum((mat - svd_factorize(mat, m).reconstruct()) ** 2))
            ek = float(np.sum((mat - kmeans_factorize(mat, m, seed=k).reconstruct()) ** 2))
            worst = max(worst, abs(ep - es) / max(es, 1e-12 * total))
            kmeans_violation = max(kmeans_violation, (ep - ek) / total)
    passed = worst <= 1e-8 and kmeans_violation <= 1e-12
    return Check("pca_svd_agreement", passed, worst, 1e-8,
                 detail={"kmeans_below_pca": kmeans_violation})


def naive_conv(x, w, b=None, stride=1, pad=0, groups=1):
    """Direct nested-loop convolution (cross-correlation)."""
    bsz, c, hh, ww = x.shape
    n, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (hh + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, n, oh, ow))
    ng = n // groups
    for bi in range(bsz):
        for o in range(n):
            g = o // ng
            for i in range(oh):
                for j in range(ow):
                    s = 0.0 if b is None else b[o]
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                s += w[o, ci, u, v] * xp[bi, g * cg + ci, i * stride + u, j * stride + v]
                    out[bi, o, i, j] = s
    return out


@_timed
def check_composition(seed: int = 8) -> Check:
    """Basis conv followed by 1x1 combination equals convolving with ``b @ B``."""
    rng = make_rng(seed, "verify-compose")
    n, c, k = 6, 3, 3
    w = rng.standard_normal((n, c, k, k))
    bias = rng.standard_normal(n)
    x = rng.standard_normal((2, c, 7, 7))
    bank = FilterBank.from_array(w)
    mat = w.reshape(n, -1)
    direct_full = naive_conv(x, w, bias, 1, 1)
    worst, lossless = 0.0, 0.0
    for method, fact_fn in (("pca", pca_factorize), ("svd", svd_factorize),
                            ("kmeans", lambda a, m: kmeans_factorize(a, m, seed=seed))):
        for m in (1, n // 2, n):
            fact = fact_fn(mat, m)
            dec = split_layer(bank, fact)
            f1, _ = L.conv2d_forward(x, dec.basis_layer.as_array(), None, 1, 1)
            composed, _ = L.conv2d_forward(f1, dec.combine_layer.as_array(), bias, 1, 0)
            recon = fact.reconstruct().reshape(w.shape)
            direct = naive_conv(x, recon, bias, 1, 1)
            worst = max(worst, _rel(composed, direct))
            if m == n and method != "kmeans":
                lossless = max(lossless, _rel(composed, direct_full))
    passed = worst <= 1e-6 and lossless <= 1e-6
    return Check("composition", passed, max(worst, lossless), 1e-6,
                 detail={"vs_reconstruction": worst, "lossless_full_rank": lossless})


@_timed
def check_speedup_threshold() -> Check:
    """Speedup for N=64, C=32, 3x3 crosses 1 between M=52 and M=53."""
    n, c, h, w = 64, 32, 3, 3
    s52 = theoretical_speedup(n, c, h, w, 16, 16, 52)
    s53 = theoretical_speedup(n, c, h, w, 16, 16, 53)
    be = break_even_rank(n, c, h, w)
    cross_ok = s52 > 1.0 > s53 and abs(be - 18432 / 352) < 1e-12
    iff_ok = all((theoretical_speedup(n, c, h, w, 5, 7, m) > 1.0) == (m < be) for m in range(1, n + 1))
    return Check("speedup_threshold", cross_ok and iff_ok, abs(be - 18432 / 352), 1e-12,
                 detail={"speedup_52": s52, "speedup_53": s53, "break_even": be})


CHECKS = {
    "perpendicularity": check_perpendicular,
    "force_scale_l2": check_force_scale_l2,
    "force_direction_l1": check_force_direction_l1,
    "regularizer_gradient_fd": check_regularizer_gradient,
    "layer_backward_fd": check_layer_gradients,
    "pca_tail_identity": check_pca_tail,
    "pca_svd_agreement": check_pca_svd_kmeans,
    "composition": check_composition,
    "speedup_threshold": check_speedup_threshold,
}


def run_all(force_fn=None) -> list[Check]:
    results = []
    for name, fn in CHECKS.items():
        if force_fn is not None and name in ("perpendicularity", "force_scale_l2",
                                             "force_direction_l1"):
            results.append(fn(force_fn=force_fn))
        else:
            results.append(fn())
    return results
