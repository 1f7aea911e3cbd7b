import math

import numpy as np
import pytest

from hipda import cohort as C
from hipda.stats import SeededRng

HEADER = ",".join(C.default_schema().names) + ",hip_fracture"


def _row(age=70, smoking="Never", pace="Brisk pace", iadl="0", y="0", weight="60"):
    return f"{age},160,{weight},20,{pace},{smoking},0,1,{iadl},-1.0,-0.5,-1.2,{y}"


def _write(tmp_path, rows, header=HEADER, name="c.csv"):
    p = tmp_path / name
    p.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return p


def test_schema_has_twelve_predictors():
    s = C.default_schema()
    assert s.d == 12
    assert [f.kind for f in s.features].count("continuous") == 7
    assert C.parse_schema(C.format_schema(s)) == s


def test_load_three_rows(tmp_path):
    t = C.load_cohort(_write(tmp_path, [_row(), _row(age=71, y="1"), _row(age=72)]))
    assert t.n == 3 and t.has_outcome and t.n_pos == 1
    assert t.column("age").tolist() == [70, 71, 72]


def test_missing_column_named(tmp_path):
    header = HEADER.replace("grip_strength,", "")
    p = _write(tmp_path, ["70,160,60,Brisk,Never,0,1,0,-1,-0.5,-1.2,0"], header)
    with pytest.raises(C.SchemaError, match="grip_strength"):
        C.load_cohort(p)


def test_parse_error_cites_row(tmp_path):
    with pytest.raises(C.ParseError) as exc:
        C.load_cohort(_write(tmp_path, [_row(), _row(age="abc")]))
    assert exc.value.row == 2 and exc.value.column == "age"


def test_recoding_examples(tmp_path):
    t = C.load_cohort(_write(tmp_path, [_row(smoking="Never", pace="Brisk pace", iadl="0"),
                                        _row(smoking="Current", pace="Slow pace", iadl="4")]))
    cols = ["smoking", "walking_pace", "iadl"]
    assert [t.column(c)[0] for c in cols] == [0, 2, 0]
    assert [t.column(c)[1] for c in cols] == [2, 0, 4]


def test_ambiguous_rows_dropped(tmp_path):
    raw = C.read_table(_write(tmp_path, [_row(), _row(pace="None of the above"),
                                         _row(smoking="Prefer not to answer")]))
    t, dropped = C.recode_categoricals(raw)
    assert t.n == 1 and dropped == 2


def test_unknown_category_errors(tmp_path):
    with pytest.raises(C.CategoryError, match="smoking"):
        C.load_cohort(_write(tmp_path, [_row(smoking="Sometimes")]))


def test_recode_idempotent(tmp_path):
    t = C.load_cohort(_write(tmp_path, [_row(), _row(smoking="Former", iadl="3")]))
    again, dropped = C.recode_categoricals(t)
    assert dropped == 0 and np.array_equal(again.X, t.X)


def test_missing_values_and_complete_case(tmp_path):
    t = C.load_cohort(_write(tmp_path, [_row(), _row(weight="NA"), _row(weight=""), _row(), _row()]))
    assert np.isnan(t.column("weight")[1]) and np.isnan(t.column("weight")[2])
    f, removed = C.complete_case_filter(t)
    assert f.n == 3 and removed == 2
    same, zero = C.complete_case_filter(f)
    assert zero == 0 and np.array_equal(same.X, f.X)
    X = np.full((3, 12), np.nan)
    empty, k = C.complete_case_filter(C.CohortTable(X, None))
    assert empty.n == 0 and k == 3


def test_write_read_round_trip(tmp_path, small_pair):
    src, _ = small_pair
    C.write_cohort(src, tmp_path / "s.csv")
    back = C.load_cohort(tmp_path / "s.csv")
    np.testing.assert_allclose(back.X, src.X, atol=5e-7)
    assert np.array_equal(back.y, src.y)


def test_cohort_table_invariants():
    with pytest.raises(C.SchemaError):
        C.CohortTable(np.zeros((2, 11)), None)
    with pytest.raises(C.SchemaError):
        C.CohortTable(np.zeros((2, 12)), [0, 2])
    t = C.CohortTable(np.zeros((2, 12)), [0, 1])
    with pytest.raises(ValueError):
        t.X[0, 0] = 1.0
    with pytest.raises(C.LeakageError):
        C.require_no_outcome(t)
    C.require_no_outcome(t.without_outcome())


def _bmd_table(rng, n=200):
    s = C.default_schema()
    X = np.zeros((n, 12))
    X[:, s.index("age")] = rng.uniform(55, 95, n)
    for c in C.BMD_COLUMNS:
        X[:, s.index(c)] = rng.normal(0.8, 0.15, n)
    y = (rng.random(n) < 0.1).astype(float)
    return C.CohortTable(X, y)


def test_standardize_bmd_reference_moments(rng):
    t = _bmd_table(rng)
    out = C.standardize_bmd(t)
    strata = C._assign_strata(t.column("age"), C.DEFAULT_STRATA)
    for col in C.BMD_COLUMNS:
        for s in (0, 1):
            ref = out.column(col)[(strata == s) & (t.y == 0)]
            assert abs(ref.mean()) < 1e-9 and abs(ref.std(ddof=1) - 1) < 1e-9


def test_standardize_bmd_hand_case():
    s = C.default_schema()
    X = np.zeros((4, 12))
    X[:, s.index("age")] = 70
    X[:, s.index("bmd_total_hip")] = [0.8, 1.2, 1.0, 1.2]  # reference rows: mean 1.0, sd 0.2
    y = np.array([0.0, 0.0, 0.0, 1.0])
    out = C.standardize_bmd(C.CohortTable(X, y), strata=((65, 75),), columns=("bmd_total_hip",))
    assert out.column("bmd_total_hip")[3] == pytest.approx(1.0, abs=1e-12)
    assert out.column("bmd_total_hip")[2] == pytest.approx(0.0, abs=1e-12)


def test_standardize_bmd_small_reference_errors():
    X = np.zeros((3, 12))
    X[:, 0] = 70
    with pytest.raises(ValueError):
        C.standardize_bmd(C.CohortTable(X, [0, 1, 1]), strata=((65, 75),))


def test_strata_nearest_assignment():
    s = C._assign_strata(np.array([60.0, 70, 75.5, 80, 99]), C.DEFAULT_STRATA)
    assert s.tolist() == [0, 0, 0, 1, 1]


def _labels(n, k):
    y = np.zeros(n)
    y[:k] = 1
    return C.CohortTable(np.zeros((n, 12)), y)


@pytest.mark.parametrize("n, k", [(410, 5), (210, 3), (4, 2), (9, 4), (2, 1)])
def test_half_split_invariants(n, k):
    t = _labels(n, k)
    for seed in range(200):
        s = C.stratified_half_split(t, seed)
        both = np.concatenate([s.pseudo_idx, s.eval_idx])
        assert np.array_equal(np.sort(both), np.arange(n))
        assert abs(len(s.pseudo_idx) - len(s.eval_idx)) <= 1
        pp, pe = int(t.y[s.pseudo_idx].sum()), int(t.y[s.eval_idx].sum())
        assert {pp, pe} == {k // 2, k - k // 2}
        if k >= 2:
            assert pp >= 1 and pe >= 1


def test_half_split_examples():
    s = C.stratified_half_split(_labels(410, 5), 0)
    assert (s.pseudo.n, s.evaluation.n) == (205, 205)
    assert sorted([s.pseudo.n_pos, s.evaluation.n_pos]) == [2, 3]
    s4 = C.stratified_half_split(_labels(4, 2), 11)
    assert s4.pseudo.n_pos == s4.evaluation.n_pos == 1
    a, b = C.stratified_half_split(_labels(50, 6), 3), C.stratified_half_split(_labels(50, 6), 3)
    assert np.array_equal(a.pseudo_idx, b.pseudo_idx)
    with pytest.raises(ValueError):
        C.stratified_half_split(_labels(1, 1), 0)
    with pytest.raises(ValueError):
        C.stratified_half_split(_labels(10, 2).without_outcome(), 0)


def test_fraction_split_keeps_both_classes():
    y = np.array([1.0] * 3 + [0.0] * 97)
    kept, held = C.stratified_fraction_split(y, 0.1, SeededRng(0))
    assert len(held) == 11 and y[held].sum() == 1 and y[kept].sum() == 2
    assert len(np.intersect1d(kept, held)) == 0


def test_sampler_weights_and_fallback():
    y = np.array([1.0] * 5 + [0.0] * 3620)
    s = C.WeightedBatchSampler(y, 64, 0)
    assert s.weights[0] / s.weights[-1] == pytest.approx(724.0, rel=1e-12)
    assert s.batches_per_epoch == math.ceil(3625 / 64)
    assert len(list(s)) == s.batches_per_epoch
    # a very small batch often draws no positive; the fallback must fix it
    tiny = C.WeightedBatchSampler(np.array([1.0] + [0.0] * 999), 2, 1)
    for _ in range(2000):
        assert y_has_pos(tiny.draw(), 0)
    with pytest.raises(ValueError):
        C.WeightedBatchSampler(np.zeros(10), 4, 0)


def y_has_pos(idx, pos_index):
    return pos_index in idx


def test_sampler_balanced_rates():
    y = np.array([1.0, 0.0] * 500)
    s = C.WeightedBatchSampler(y, 32, 2)
    assert np.allclose(s.weights, s.weights[0])
    frac = np.mean([y[s.draw()].mean() for _ in range(1000)])
    assert abs(frac - 0.5) < 0.05


def test_sampler_inverse_frequency_ratio():
    y = np.array([1.0] * 50 + [0.0] * 950)
    s = C.WeightedBatchSampler(y, 100, 3)
    draws = np.concatenate([s.draw() for _ in range(200)])  # 20000 draws
    assert abs(y[draws].mean() - 0.5) / 0.5 < 0.05
    with pytest.raises(ValueError):
        C.weighted_batch_iterator(C.CohortTable(np.zeros((4, 12)), None), 2, 0)
