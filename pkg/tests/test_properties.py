"""Property-based invariants."""
import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hipda import evaluation as E
from hipda import losses as L
from hipda.cohort import CohortTable, stratified_half_split
from hipda.stats import covariance_matrix

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def embedding_pair(draw, min_rows=1):
    p = draw(st.integers(1, 4))
    ns = draw(st.integers(min_rows, 10))
    nt = draw(st.integers(min_rows, 10))
    return draw(arrays(float, (ns, p), elements=finite)), draw(arrays(float, (nt, p), elements=finite))


@SETTINGS
@given(embedding_pair())
def test_mmd_symmetric_and_nonnegative(pair):
    a, b = pair
    v = L.mmd2_multiscale(a, b)
    assert v >= -1e-12
    assert abs(v - L.mmd2_multiscale(b, a)) < 1e-12


@SETTINGS
@given(embedding_pair(), st.integers(0, 2**32 - 1))
def test_mmd_row_permutation_invariant(pair, seed):
    a, b = pair
    rng = np.random.default_rng(seed)
    assert abs(L.mmd2_multiscale(a, b) - L.mmd2_multiscale(rng.permutation(a), rng.permutation(b))) < 1e-12


@SETTINGS
@given(embedding_pair(min_rows=2), arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
def test_coral_translation_invariant(pair, u, v):
    a, b = pair
    p = a.shape[1]
    base = L.coral(a, b)
    assert base >= 0
    assert abs(L.coral(a + u[:p], b + v[:p]) - base) < 1e-12
    assert abs(L.coral(b, a) - base) < 1e-12


@SETTINGS
@given(arrays(float, st.tuples(st.integers(2, 12), st.integers(1, 4)), elements=finite))
def test_covariance_psd(H):
    C = covariance_matrix(H)
    assert np.allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() > -1e-9


@st.composite
def scored_labels(draw):
    n = draw(st.integers(2, 40))
    y = draw(arrays(np.int64, n, elements=st.integers(0, 1)))
    y[0], y[1] = 0, 1
    s = draw(arrays(float, n, elements=st.floats(-3, 3, allow_nan=False).map(lambda x: round(x, 1))))
    return s, y


@SETTINGS
@given(scored_labels())
def test_auc_monotone_invariance(data):
    s, y = data
    a = E.auc(s, y)
    assert 0 <= a <= 1
    assert E.auc(np.exp(s), y) == a
    assert E.auc(2.5 * s - 1, y) == a
    assert abs(E.auc(-s, y) - (1 - a)) < 1e-12


@SETTINGS
@given(st.integers(2, 400), st.data())
def test_half_split_properties(n, data):
    k = data.draw(st.integers(0, n))
    seed = data.draw(st.integers(0, 2**31))
    y = np.zeros(n)
    y[data.draw(st.permutations(range(n)))[:k]] = 1
    s = stratified_half_split(CohortTable(np.zeros((n, 12)), y), seed)
    assert np.array_equal(np.sort(np.concatenate([s.pseudo_idx, s.eval_idx])), np.arange(n))
    assert abs(len(s.pseudo_idx) - len(s.eval_idx)) <= 1
    pp, pe = int(y[s.pseudo_idx].sum()), int(y[s.eval_idx].sum())
    assert abs(pp - pe) <= 1
    if k >= 2:
        assert pp >= 1 and pe >= 1
