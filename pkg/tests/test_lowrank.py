import numpy as np
import pytest

from _oracles import naive_conv, rel
from forcelr.filters import FilterBank, reshape_to_matrix
from forcelr.force import ForceConfig, apply_update, force_gradient
from forcelr.lowrank import (Method, analyze_bank, break_even_rank, error_curve,
                             error_curve_from_spectrum, factorize, kmeans_factorize, layer_rank,
                             pca_factorize, pca_spectrum, select_rank, split_layer,
                             svd_factorize, theoretical_speedup)


def test_pca_identical_rows_rank_one():
    row = np.random.default_rng(0).standard_normal(9)
    w = np.vstack([row, row])
    fact = pca_factorize(w, 1)
    assert np.allclose(fact.reconstruct(), w, atol=1e-12)
    assert fact.reconstruction_error_pct == pytest.approx(0.0, abs=1e-15)


def test_pca_identity_half_error():
    assert pca_factorize(np.eye(2), 1).reconstruction_error_pct == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(3))
def test_pca_tail_identity(seed):
    w = np.random.default_rng(seed).standard_normal((8, 18))
    vals, _ = pca_spectrum(w)
    for m in range(1, 9):
        fact = pca_factorize(w, m)
        err = np.sum((w - fact.reconstruct()) ** 2)
        tail = 17 * vals[m:].sum()
        assert abs(err - tail) <= 1e-8 * max(tail, np.sum(w * w) * 1e-12)


def test_svd_axis_aligned():
    fact = svd_factorize(np.array([[2.0, 0.0], [0.0, 1.0]]), 1)
    b = fact.basis[0] / np.linalg.norm(fact.basis[0])
    assert np.allclose(np.abs(b), [1.0, 0.0])
    assert np.allclose(fact.reconstruct(), [[2.0, 0.0], [0.0, 0.0]])


@pytest.mark.parametrize("shape", [(4, 9), (6, 6), (5, 3)])
def test_full_rank_is_lossless(shape):
    w = np.random.default_rng(1).standard_normal(shape)
    for method in ("pca", "svd", "kmeans"):
        fact = factorize(w, shape[0], method)
        assert rel(fact.reconstruct(), w) <= 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_pca_equals_truncated_svd(seed):
    w = np.random.default_rng(seed + 10).standard_normal((8, 18))
    for m in range(1, 8):
        e_p = np.linalg.norm(w - pca_factorize(w, m).reconstruct())
        e_s = np.linalg.norm(w - svd_factorize(w, m).reconstruct())
        assert abs(e_p - e_s) <= 1e-8 * e_s
    # at full rank both errors are rounding noise only
    for fact in (pca_factorize(w, 8), svd_factorize(w, 8)):
        assert np.linalg.norm(w - fact.reconstruct()) <= 1e-12 * np.linalg.norm(w)


def test_kmeans_two_tight_pairs():
    w = np.array([[0.0, 0.0], [0.2, 0.0], [5.0, 5.0], [5.0, 5.4]])
    fact = kmeans_factorize(w, 2, seed=3)
    centers = sorted(map(tuple, np.round(fact.basis, 12)))
    assert np.allclose(centers, [(0.1, 0.0), (5.0, 5.2)])
    row_err = np.linalg.norm(w - fact.reconstruct(), axis=1)
    assert np.allclose(row_err, [0.1, 0.1, 0.2, 0.2])
    assert np.allclose(fact.combination.sum(axis=1), 1.0)


def test_kmeans_never_beats_pca():
    w = np.random.default_rng(7).standard_normal((10, 6))
    e_k = np.linalg.norm(w - kmeans_factorize(w, 3, seed=0).reconstruct())
    e_p = np.linalg.norm(w - pca_factorize(w, 3).reconstruct())
    assert e_k >= e_p


def test_kmeans_curve_monotone_and_deterministic():
    w = np.random.default_rng(8).standard_normal((12, 10))
    a = error_curve(w, "kmeans", seed=4)
    assert np.all(np.diff(a) <= 1e-12)
    assert a[-1] == pytest.approx(0.0, abs=1e-15)
    assert np.array_equal(a, error_curve(w.copy(), "kmeans", seed=4))


def test_kmeans_handles_duplicate_rows():
    w = np.vstack([np.ones((5, 3)), np.zeros((1, 3))])
    fact = kmeans_factorize(w, 4, seed=0)
    assert rel(fact.reconstruct(), w) <= 1e-12


def test_select_rank_examples():
    assert select_rank([10.0, 0.4, 0.1], 0.05) == 1
    assert select_rank([1.0, 1.0], 0.05) == 2
    vals = np.array([5.0, 2.0, 1.0, 0.5])
    curve = error_curve_from_spectrum(vals)
    assert select_rank(vals, np.nextafter(curve[-2], 0)) == 4
    assert select_rank(vals, 0.0) == 4
    assert select_rank([0.0, 0.0], 0.05) == 1
    with pytest.raises(ValueError):
        select_rank(vals, 1.0)


def test_error_curve_from_spectrum():
    curve = error_curve_from_spectrum([3.0, 2.0, 1.0])
    assert np.allclose(curve, [0.5, 1 / 6, 0.0])


def test_rank_three_layer():
    rng = np.random.default_rng(9)
    w = rng.standard_normal((16, 3)) @ rng.standard_normal((3, 27))
    assert layer_rank(w, 0.0) == 3
    assert layer_rank(w, 1e-9) == 3
    for tau in (0.05, 0.5, 0.9):
        assert 1 <= layer_rank(w, tau) <= 3


def _bank(rng, n=6, c=3, k=3, groups=1):
    return FilterBank.from_array(rng.standard_normal((n, c, k, k)), groups)


def _compose(split, x, pad, stride=1, groups=1):
    mid = naive_conv(x, split.basis_layer.as_array(), None, stride, pad, groups)
    return naive_conv(mid, split.combine_layer.as_array(), None, 1, 0, groups)


@pytest.mark.parametrize("method", ["pca", "svd", "kmeans"])
@pytest.mark.parametrize("m", [1, 3, 6])
def test_split_matches_reconstructed_convolution(method, m):
    rng = np.random.default_rng(20)
    bank = _bank(rng)
    x = rng.standard_normal((2, 3, 6, 6))
    fact = factorize(reshape_to_matrix(bank), m, method)
    split = split_layer(bank, fact)
    recon = fact.reconstruct().reshape(bank.shape)
    assert rel(_compose(split, x, 1), naive_conv(x, recon, None, 1, 1)) <= 1e-6
    if m == 6 and method != "kmeans":
        assert rel(_compose(split, x, 1), naive_conv(x, bank.as_array(), None, 1, 1)) <= 1e-6


def test_split_rank_one_bank():
    rng = np.random.default_rng(21)
    w = np.outer(rng.standard_normal(5), rng.standard_normal(2 * 3 * 3)).reshape(5, 2, 3, 3)
    bank = FilterBank.from_array(w)
    split = split_layer(bank, pca_factorize(reshape_to_matrix(bank), 1))
    x = rng.standard_normal((1, 2, 5, 5))
    assert rel(_compose(split, x, 0), naive_conv(x, w)) <= 1e-6


def test_split_grouped_layer():
    rng = np.random.default_rng(22)
    bank = _bank(rng, n=4, c=2, groups=2)
    facts = [pca_factorize(reshape_to_matrix(bank, g), 2) for g in range(2)]
    split = split_layer(bank, facts)
    x = rng.standard_normal((1, 4, 5, 5))
    assert rel(_compose(split, x, 1, groups=2), naive_conv(x, bank.as_array(), None, 1, 1, 2)) <= 1e-6
    with pytest.raises(ValueError):
        split_layer(bank, [facts[0], pca_factorize(reshape_to_matrix(bank, 1), 1)])


def test_speedup_examples():
    assert break_even_rank(64, 32, 3, 3) == pytest.approx(18432 / 352)
    assert theoretical_speedup(64, 32, 3, 3, 10, 10, 52) > 1
    assert theoretical_speedup(64, 32, 3, 3, 10, 10, 53) < 1
    chw, n = 27, 16
    assert theoretical_speedup(n, 3, 3, 3, 7, 7, n) == pytest.approx(chw / (chw + n))
    for m in range(1, n + 1):
        assert (theoretical_speedup(n, 3, 3, 3, 5, 5, m) > 1) == (m < n * chw / (chw + n))


def test_analyze_bank_report():
    bank = _bank(np.random.default_rng(23), n=8, c=4)
    rows = analyze_bank("conv", bank, (6, 6), 0.05)
    assert len(rows) == 1 and rows[0].full_rank == 8
    assert rows[0].rank_ratio >= 0.75


def test_force_descent_lowers_rank():
    w = np.random.default_rng(24).standard_normal((16, 27))
    cfg = ForceConfig("l2", 1.0)
    start = layer_rank(w, 0.05)
    for _ in range(200):
        w = apply_update(w, np.zeros_like(w), force_gradient(w, cfg), 0.01, 1.0)
    assert layer_rank(w, 0.05) < start


def test_method_enum():
    assert Method("svd") is Method.SVD
    with pytest.raises(ValueError):
        factorize(np.eye(3), 1, "nmf")
    with pytest.raises(ValueError):
        pca_factorize(np.eye(3), 4)
