import math

import numpy as np
import pytest

from forcelr.force import (DegenerateFilterError, ForceConfig, ForceGradient, apply_update,
                           force_gradient, mean_pairwise_cosine, pairwise_force,
                           reference_regularizer, reference_regularizer_gradient)


def naive_force(w, kind="l2", scaler="length"):
    """Triple loop straight from the definition of the force gradient."""
    n, d = w.shape
    out = np.zeros((n, d))
    for i in range(n):
        li = math.sqrt(sum(w[i, k] ** 2 for k in range(d)))
        ui = [w[i, k] / li for k in range(d)]
        s = [0.0] * d
        for j in range(n):
            if j == i:
                continue
            lj = math.sqrt(sum(w[j, k] ** 2 for k in range(d)))
            diff = [w[j, k] / lj - ui[k] for k in range(d)]
            if kind == "l1":
                dist = math.sqrt(sum(x * x for x in diff))
                diff = [x / dist for x in diff] if dist >= 1e-8 else [0.0] * d
            for k in range(d):
                s[k] += diff[k]
        dot = sum(s[k] * ui[k] for k in range(d))
        scale = li if scaler == "length" else 1 / li
        for k in range(d):
            out[i, k] = scale * (s[k] - dot * ui[k])
    return out


def naive_regularizer(w, kind="l2"):
    u = w / np.linalg.norm(w, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(u)):
        for j in range(i + 1, len(u)):
            d = np.linalg.norm(u[j] - u[i])
            total += 0.5 * d * d if kind == "l2" else d
    return total


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_pairwise_force_examples():
    wi, wj = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.allclose(pairwise_force(wi, wj, "l2"), [-1, 1])
    assert np.allclose(pairwise_force(wi, wj, "l1"), np.array([-1, 1]) / np.sqrt(2))
    assert np.array_equal(pairwise_force(wi, wi, "l1"), [0.0, 0.0])


def test_two_filter_hand_example():
    w = np.array([[2.0, 0.0], [0.0, 1.0]])
    delta = force_gradient(w, ForceConfig("l2", 1.0)).delta
    assert np.allclose(delta[0], [0.0, 2.0])
    # f_12 = (1,-1), tangent to (0,1) is (1,0), length 1
    assert np.allclose(delta[1], [1.0, 0.0])


def test_parallel_filters_feel_no_force():
    base = np.random.default_rng(0).standard_normal(7)
    # power-of-two multiples normalize to bit-identical unit rows
    w = np.outer([1.0, 2.0, 0.5, 4.0], base)
    assert np.array_equal(force_gradient(w, ForceConfig("l2", 1.0)).delta, np.zeros_like(w))
    w = np.outer([1.0, 2.5, 0.3, 7.0], base)
    assert np.max(np.abs(force_gradient(w, ForceConfig("l2", 1.0)).delta)) < 1e-14


@pytest.mark.parametrize("kind", ["l2", "l1"])
@pytest.mark.parametrize("scaler", ["length", "reciprocal"])
def test_matches_triple_loop(kind, scaler):
    w = np.random.default_rng(6).standard_normal((6, 10))
    delta = force_gradient(w, ForceConfig(kind, 1.0, scaler=scaler)).delta
    assert np.max(np.abs(delta - naive_force(w, kind, scaler))) <= 1e-12


@pytest.mark.parametrize("kind", ["l2", "l1"])
def test_perpendicular_to_own_filter(kind):
    w = np.random.default_rng(9).standard_normal((12, 30))
    fg = force_gradient(w, ForceConfig(kind, 1.0))
    unit = w / np.linalg.norm(w, axis=1, keepdims=True)
    assert np.max(np.abs(np.sum(fg.delta * unit, axis=1))) < 1e-12
    assert np.max(fg.perp_residuals) < 1e-12


def test_degenerate_filter_neither_feels_nor_exerts():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((4, 5))
    w0 = w.copy()
    w0[2] = 0.0
    delta = force_gradient(w0, ForceConfig("l2", 1.0)).delta
    assert np.array_equal(delta[2], np.zeros(5))
    expect = force_gradient(np.delete(w, 2, axis=0), ForceConfig("l2", 1.0)).delta
    assert np.allclose(np.delete(delta, 2, axis=0), expect, atol=1e-14)


def test_force_scales_with_filter_length():
    w = np.random.default_rng(2).standard_normal((5, 8))
    cfg = ForceConfig("l2", 1.0)
    scaled = w.copy()
    scaled[0] *= 3.0
    # directions are unchanged, so only row 0's magnitude triples
    a, b = force_gradient(w, cfg).delta, force_gradient(scaled, cfg).delta
    assert np.allclose(b[0], 3 * a[0])
    assert np.allclose(b[1:], a[1:])


def test_regularizer_examples():
    eye = np.eye(2)
    assert reference_regularizer(eye, "l2") == pytest.approx(1.0)
    assert reference_regularizer(eye, "l2", ordered=True) == pytest.approx(2.0)
    same = np.ones((3, 4))
    assert reference_regularizer(same, "l2") == 0.0
    assert reference_regularizer(same, "l1") == 0.0
    assert np.array_equal(reference_regularizer_gradient(same, "l2"), np.zeros((3, 4)))


@pytest.mark.parametrize("kind", ["l2", "l1"])
def test_regularizer_matches_double_loop(kind):
    w = np.random.default_rng(4).standard_normal((5, 8))
    assert abs(reference_regularizer(w, kind) - naive_regularizer(w, kind)) <= 1e-12


def test_regularizer_rejects_degenerate_rows():
    w = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DegenerateFilterError, match="undefined normalized distance"):
        reference_regularizer(w)
    with pytest.raises(DegenerateFilterError):
        reference_regularizer_gradient(w)


@pytest.mark.parametrize("kind", ["l2", "l1"])
@pytest.mark.parametrize("ordered", [False, True])
def test_gradient_matches_finite_differences(kind, ordered):
    w = np.random.default_rng(12).standard_normal((4, 6))
    num = fd_grad(lambda x: reference_regularizer(x, kind, ordered=ordered), w)
    ana = reference_regularizer_gradient(w, kind, ordered=ordered)
    assert np.linalg.norm(ana - num) <= 1e-5 * np.linalg.norm(num)


@pytest.mark.parametrize("kind", ["l2", "l1"])
def test_force_is_scaled_negative_gradient(kind):
    w = np.random.default_rng(13).standard_normal((4, 6))
    delta = force_gradient(w, ForceConfig(kind, 1.0)).delta
    grad = reference_regularizer_gradient(w, kind)
    sq = np.sum(w * w, axis=1, keepdims=True)
    assert np.allclose(grad, -delta / sq, rtol=0, atol=1e-13)


def test_small_force_step_decreases_regularizer():
    w = np.random.default_rng(14).standard_normal((8, 12))
    cfg = ForceConfig("l2", 1.0)
    before = reference_regularizer(w)
    after = apply_update(w, np.zeros_like(w), force_gradient(w, cfg), 1e-3, 1.0)
    assert reference_regularizer(after) < before


def test_apply_update_sign_and_identity():
    w = np.random.default_rng(15).standard_normal((3, 4))
    zero = np.zeros_like(w)
    assert np.array_equal(apply_update(w, zero, zero, 0.1, 1.0), w)
    delta = np.random.default_rng(16).standard_normal((3, 4))
    assert np.allclose(apply_update(w, zero, ForceGradient(delta, zero[:, 0]), 0.1, 1.0),
                       w + 0.1 * delta)
    g = np.ones_like(w)
    assert np.allclose(apply_update(w, g, delta, 0.1, -2.0), w - 0.1 * (g + 2.0 * delta))


def test_apply_update_validation():
    w = np.zeros((2, 3))
    with pytest.raises(ValueError, match="shape mismatch"):
        apply_update(w, np.zeros((3, 2)), np.zeros((2, 3)), 0.1, 1.0)
    with pytest.raises(ValueError):
        apply_update(w, w, w, 0.0, 1.0)


def test_config_round_trip_and_validation():
    cfg = ForceConfig("l1", 0.5, scaler="reciprocal")
    assert ForceConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ForceConfig("l3", 1.0)
    with pytest.raises(ValueError):
        ForceConfig("l2", float("nan"))


def test_mean_pairwise_cosine():
    assert mean_pairwise_cosine(np.eye(3)) == pytest.approx(0.0)
    assert mean_pairwise_cosine(np.array([[1.0, 0.0], [2.0, 0.0]])) == pytest.approx(1.0)
    assert mean_pairwise_cosine(np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(-1.0)
