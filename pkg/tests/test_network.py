import math

import numpy as np
import pytest

from hipda import losses as L
from hipda import network as N
from hipda.stats import SeededRng
from gradcheck import max_relative_error


@pytest.mark.parametrize("norm", ["none", "layer", "batch"])
@pytest.mark.parametrize("flags", L.ALL_COMBINATIONS, ids=lambda f: f.label or "base")
def test_gradients_match_finite_differences(norm, flags):
    assert max_relative_error(flags, norm=norm) < 1e-4


def test_init_bounds_and_determinism():
    a, b = N.init_params(7, h=16), N.init_params(7, h=16)
    assert a.digest() == b.digest()
    assert np.all(np.abs(a.extractor.W1) <= 1 / math.sqrt(12))
    assert np.all(a.extractor.b1 == 0) and np.all(a.extractor.g1 == 1) and np.all(a.extractor.s1 == 0)
    assert N.init_params(0, h=256).extractor.p == 256
    assert N.init_params(8, h=16).digest() != a.digest()
    disc = a.discriminator.layers
    assert disc[0][0].shape == (16, 16) and disc[1][0].shape == (16, 1)


def test_extract_examples():
    m = N.init_params(0, d=3, h=4, p=2, norm="none", dropout=0.0)
    e = m.extractor
    for arr in (e.W1, e.b1, e.W2, e.b2):
        arr[...] = 0
    assert np.array_equal(N.extract(e, np.ones((5, 3))), np.zeros((5, 2)))

    toy = N.ExtractorParams(np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1))
    assert N.extract(toy, np.array([[-3.0]]))[0, 0] == 0.0
    assert N.extract(toy, np.array([[2.0]]))[0, 0] == 2.0


def test_layer_norm_identity(rng):
    m = N.init_params(1, d=12, h=32, norm="layer", dropout=0.0)
    z = rng.normal(size=(4, 32)) * 5 + 2
    out, _, _ = N._norm_forward(z, m.extractor.g1, m.extractor.s1, "layer", "eval")
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=1), 1, atol=1e-5)


def test_batch_norm_modes(rng):
    m = N.init_params(2, d=12, h=8, norm="batch", dropout=0.0)
    X = rng.normal(size=(10, 12))
    with pytest.raises(ValueError):
        N.extract(m.extractor, X[:1], "train", bn=m.bn)
    before = m.bn.mean1.copy()
    _, _, new_bn = N.extract(m.extractor, X, "train", bn=m.bn, return_cache=True)
    assert np.array_equal(m.bn.mean1, before)  # never mutated in place
    assert not np.array_equal(new_bn.mean1, before)
    _, _, same = N.extract(m.extractor, X, "eval", bn=m.bn, return_cache=True)
    assert same is m.bn


def test_dropout_only_in_train_mode(rng):
    m = N.init_params(3, d=12, h=16, dropout=0.5)
    X = rng.normal(size=(6, 12))
    e1 = N.extract(m.extractor, X, "eval")
    assert np.array_equal(e1, N.extract(m.extractor, X, "eval"))
    t1 = N.extract(m.extractor, X, "train", SeededRng(1))
    t2 = N.extract(m.extractor, X, "train", SeededRng(1))
    assert np.array_equal(t1, t2)
    assert not np.array_equal(t1, e1)


def test_classify_and_discriminate_examples(rng):
    H = rng.normal(size=(5, 3))
    c = N.ClassifierParams(np.zeros(3), np.array([math.log(3)]))
    assert np.allclose(N.classify(c, H), 0.75, atol=1e-15)
    c0 = N.ClassifierParams(np.zeros(3), np.zeros(1))
    assert np.all(N.classify(c0, H) == 0.5)
    d0 = N.DiscriminatorParams([(np.zeros((3, 3)), np.zeros(3)), (np.zeros((3, 1)), np.zeros(1))])
    assert np.all(N.discriminate(d0, H) == 0.5)
    m = N.init_params(0, h=3)
    out = N.discriminate(m.discriminator, H * 100)
    assert np.all((out >= 0) & (out <= 1))
    assert np.array_equal(out, N.discriminate(m.discriminator, H * 100))
    c1 = N.ClassifierParams(np.array([1.0, 0.0, 0.0]), np.zeros(1))
    s = N.classify(c1, np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]))
    assert s[0] < s[1] < s[2]


def test_grl_examples():
    x = np.array([1.5, -2.0])
    assert N.grl_forward(x) is x
    assert N.grl_backward(1.0, 0.5) == -0.5
    assert np.all(N.grl_backward(x, 0.0) == 0)
    assert np.array_equal(N.grl_backward(N.grl_backward(x, 1.0), 1.0), x)
    with pytest.raises(ValueError):
        N.grl_backward(x, -1.0)


def test_zero_lambda_gives_zero_discriminator_gradients(rng):
    m = N.init_params(0, d=3, h=4, p=2)
    Xs, Xt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    ys = np.array([1.0, 0, 0, 1, 0, 0])
    res = N.backward(m, Xs, ys, Xt, L.LossWeights(0, 0, 0), L.Flags(True, True, True), 1.0, SeededRng(0))
    for k, g in res.grads.items():
        if k.startswith("d."):
            assert np.all(g == 0)


def test_duplicated_rows_double_the_summed_gradient(rng):
    m = N.init_params(0, d=3, h=4, p=2, norm="none", dropout=0.0)
    X = rng.normal(size=(4, 3))
    y = np.array([1.0, 0, 1, 0])
    g1 = N.backward(m, X, y, None, L.LossWeights(), L.Flags(), mode="eval").grads
    g2 = N.backward(m, np.vstack([X, X]), np.concatenate([y, y]), None, L.LossWeights(), L.Flags(),
                    mode="eval").grads
    for k in g1:
        # the task loss is a batch mean: duplicating every row doubles the
        # unnormalized sum and the count, leaving the gradient unchanged
        np.testing.assert_allclose(g2[k], g1[k], atol=1e-14)


def test_baseline_does_not_touch_target(rng):
    m = N.init_params(0, d=3, h=4, p=2)
    Xs = rng.normal(size=(6, 3))
    ys = np.array([1.0, 0, 0, 1, 0, 0])
    a = N.backward(m, Xs, ys, None, L.LossWeights(), L.Flags(), rng=SeededRng(1))
    b = N.backward(m, Xs, ys, rng.normal(size=(6, 3)), L.LossWeights(), L.Flags(), rng=SeededRng(1))
    for k in a.grads:
        assert np.array_equal(a.grads[k], b.grads[k])
    with pytest.raises(ValueError):
        N.backward(m, Xs, ys, None, L.LossWeights(0.5), L.Flags(mmd=True))


@pytest.mark.parametrize("norm", ["none", "layer", "batch"])
def test_checkpoint_round_trip(tmp_path, norm):
    m = N.init_params(4, h=8, norm=norm)
    digest = N.save_checkpoint(tmp_path / "m.ckpt", m, {"note": "x"})
    back, meta = N.load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": "x"}
    assert back.digest() == m.digest()
    for k, v in m.state_arrays().items():
        assert np.array_equal(back.state_arrays()[k], v)
    assert len(digest) == 64
    X = np.random.default_rng(0).normal(size=(5, 12))
    assert np.array_equal(N.predict_proba(back, X), N.predict_proba(m, X))
