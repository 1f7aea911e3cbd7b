import math

import numpy as np
import pytest

from hipda import losses as L
from oracles import coral as coral_oracle
from oracles import median_base, mmd2 as mmd_oracle


def test_weighted_bce_examples():
    assert L.weighted_bce([0.5], [1], 3.0) == pytest.approx(3 * math.log(2), abs=1e-12)
    assert L.weighted_bce([0.0], [0]) == pytest.approx(-math.log(1 - 1e-7), abs=1e-15)
    assert L.weighted_bce([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        L.weighted_bce([], [])


def test_weighted_bce_monotone_in_omega():
    p, y = np.array([0.3, 0.8, 0.6]), np.array([1, 0, 1])
    vals = [L.weighted_bce(p, y, w) for w in (0.5, 1.0, 2.0, 10.0)]
    assert vals == sorted(vals) and len(set(vals)) == 4


def test_domain_bce_examples():
    d = np.array([0, 0, 1, 1])
    assert L.domain_bce(d.astype(float), d) == pytest.approx(0.0, abs=1e-6)
    assert L.domain_bce(np.full(4, 0.5), d) == pytest.approx(math.log(2), abs=1e-12)
    assert L.domain_bce(1.0 - d, d) == pytest.approx(-math.log(1e-7), abs=1e-6)


def test_rbf_kernel_examples():
    assert L.rbf_kernel([1.0, 2.0], [1.0, 2.0], 0.7) == 1.0
    s2 = 1.5
    assert L.rbf_kernel([0.0, 0.0], [math.sqrt(2 * s2), 0.0], s2) == pytest.approx(math.exp(-1), abs=1e-15)
    assert L.rbf_kernel([0.3, 1.0], [2.0, -1.0], 0.4) == L.rbf_kernel([2.0, -1.0], [0.3, 1.0], 0.4)


def test_median_heuristic_examples():
    assert L.median_heuristic_base([[0.0]], [[1.0], [3.0]]) == 4.0
    assert L.median_heuristic_base(np.ones((3, 2)), np.ones((2, 2))) == 1.0
    assert L.median_heuristic_base([[0.0]], [[2.0]]) == 4.0


def test_mmd_hand_case():
    expected = np.mean([2 - 2 * math.exp(-1), 2 - 2 * math.exp(-0.5), 2 - 2 * math.exp(-0.25)])
    assert L.mmd2_multiscale([[0.0]], [[2.0]]) == pytest.approx(expected, abs=1e-14)
    assert L.mmd2_multiscale([[0.0]], [[2.0]]) == pytest.approx(0.8312, abs=1e-4)


def test_mmd_matches_brute_force(rng):
    for _ in range(50):
        p = int(rng.integers(1, 5))
        Hs = rng.normal(size=(int(rng.integers(1, 13)), p))
        Ht = rng.normal(size=(int(rng.integers(1, 13)), p)) + rng.normal()
        assert abs(L.mmd2_multiscale(Hs, Ht) - mmd_oracle(Hs, Ht)) < 1e-12


def test_mmd_identical_and_symmetric(rng):
    H = rng.normal(size=(7, 3))
    assert abs(L.mmd2_multiscale(H, H[::-1])) < 1e-12
    A, B = rng.normal(size=(6, 2)), rng.normal(size=(7, 2))
    assert L.mmd2_multiscale(A, B) == pytest.approx(L.mmd2_multiscale(B, A), abs=1e-14)
    with pytest.raises(ValueError):
        L.mmd2_multiscale(np.zeros((0, 2)), B)


def test_median_base_matches_oracle(rng):
    for _ in range(20):
        A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        assert L.median_heuristic_base(A, B) == pytest.approx(median_base(np.vstack([A, B]).tolist()), abs=1e-14)


def test_coral_examples(rng):
    Hs = np.array([[1.0, 0.0], [-1.0, 0.0]])
    Ht = np.array([[0.0, 1.0], [0.0, -1.0]])
    assert L.coral(Hs, Ht) == 0.5
    H = rng.normal(size=(9, 3))
    assert L.coral(H, H[rng.permutation(9)]) == pytest.approx(0.0, abs=1e-15)
    A, B = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    assert abs(L.coral(A, B + np.array([3.0, -2.0, 7.0])) - L.coral(A, B)) < 1e-12
    assert abs(L.coral(A, B) - coral_oracle(A, B)) < 1e-12
    assert L.coral(A, B, q=2.0) == L.coral(A, B)
    with pytest.raises(ValueError):
        L.coral(A[:1], B)


def test_coral_lq_reduces_and_scales(rng):
    A, B = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    diff = np.cov(A, rowvar=False) - np.cov(B, rowvar=False)
    q = 1.5
    ref = (np.abs(diff) ** q).sum() ** (2 / q) / 36
    assert L.coral(A, B, q=q) == pytest.approx(ref, rel=1e-12)


def _fd(f, X, eps=1e-6):
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        old = X[idx]
        X[idx] = old + eps
        hi = f()
        X[idx] = old - eps
        lo = f()
        X[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


@pytest.mark.parametrize("fn, grad", [(L.mmd2_multiscale, L.mmd2_multiscale_grad),
                                      (L.coral, L.coral_grad)])
def test_alignment_gradients_match_finite_differences(fn, grad, rng):
    for _ in range(5):
        Hs, Ht = rng.normal(size=(6, 3)), rng.normal(size=(5, 3)) + 0.4
        v, gs, gt = grad(Hs, Ht)
        assert v == pytest.approx(fn(Hs, Ht), abs=1e-15)
        np.testing.assert_allclose(gs, _fd(lambda: fn(Hs, Ht), Hs), atol=1e-7, rtol=1e-5)
        np.testing.assert_allclose(gt, _fd(lambda: fn(Hs, Ht), Ht), atol=1e-7, rtol=1e-5)


def test_coral_lq_gradient(rng):
    Hs, Ht = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    v, gs, gt = L.coral_grad(Hs, Ht, q=3.0)
    np.testing.assert_allclose(gs, _fd(lambda: L.coral(Hs, Ht, q=3.0), Hs), atol=1e-7, rtol=1e-5)


def test_composite_examples():
    w = L.LossWeights(0.7, 0.7, 0.7)
    allf = L.Flags(True, True, True)
    assert L.composite(0.5, 0.2, 0.1, 0.7, w, allf) == pytest.approx(1.20, abs=1e-12)
    assert L.composite(0.5, 0.2, 0.1, 0.7, w, L.Flags()) == 0.5
    w2 = L.LossWeights(1.7, 0.7, 0.7)
    assert L.composite(0.5, 0.2, 0.1, 0.7, w2, allf) - L.composite(0.5, 0.2, 0.1, 0.7, w, allf) \
        == pytest.approx(0.2, abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(-0.1)
    with pytest.raises(ValueError):
        L.LossWeights(omega=0)
    with pytest.raises(ValueError):
        L.LossWeights(q=0.5)
    with pytest.raises(ValueError):
        L.KernelScaleSet(0.0)
    assert L.KernelScaleSet(4.0).sigma2 == (2.0, 4.0, 8.0)


def test_flags_parsing():
    assert L.Flags.parse("mmd,coral,dann") == L.Flags(True, True, True)
    assert L.Flags.parse("M+D") == L.Flags(mmd=True, dann=True)
    assert L.Flags.parse("none") == L.Flags()
    assert L.Flags.parse("grl").label == "D"
    with pytest.raises(ValueError):
        L.Flags.parse("tca")
    assert [f.label for f in L.ALL_COMBINATIONS] == ["", "M", "C", "D", "MC", "MD", "CD", "MCD"]
