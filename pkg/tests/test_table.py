import math

import numpy as np
import pytest

from oracles import average_rank_quantiles
from ft_evolve.errors import (
    ArityMismatch,
    DegenerateColumn,
    InvalidDataset,
    LengthMismatch,
    MissingTarget,
    NonNumericCell,
    TooFewRows,
)
from ft_evolve.expr import DEFAULT_OPERATORS, parse_sequence
from ft_evolve.table import (
    CLASSIFICATION,
    REGRESSION,
    Dataset,
    apply_operator,
    execute_combination,
    execute_sequence,
    impute_median,
    load_csv,
)

OPS = DEFAULT_OPERATORS


def op(name):
    return OPS.lookup(name)


def two_col(a, b, y=None):
    a = np.asarray(a, dtype=float)
    return Dataset("t", ("a", "b"), np.column_stack([a, b]), y if y is not None else np.arange(len(a)), REGRESSION)


# ---- loading ---------------------------------------------------------------


def test_load_csv_target_last(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    d = load_csv(p)
    assert d.feature_names == ("a", "b")
    assert d.n_features == 2 and d.n_rows == 3
    assert d.y.tolist() == [3.0, 6.0, 9.0]
    assert d.name == "toy"


def test_load_csv_named_target_and_classification(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("label,x\n0,1.5\n1,2.5\n1,3.5\n")
    d = load_csv(p, target="label", task=CLASSIFICATION)
    assert d.feature_names == ("x",)
    assert d.y.dtype == np.int64


def test_load_csv_errors(tmp_path):
    header_only = tmp_path / "h.csv"
    header_only.write_text("a,b,y\n")
    with pytest.raises(TooFewRows):
        load_csv(header_only)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,y\n1,2,3\n4,abc,6\n")
    with pytest.raises(NonNumericCell) as info:
        load_csv(bad)
    assert info.value.row == 3 and info.value.column == "b" and info.value.value == "abc"
    with pytest.raises(MissingTarget):
        load_csv(bad, target="zzz")


def test_dataset_invariants():
    with pytest.raises(LengthMismatch):
        Dataset("t", ("a",), np.ones((3, 1)), np.ones(4), REGRESSION)
    with pytest.raises(InvalidDataset):
        Dataset("t", ("a",), np.ones((3, 1)), np.zeros(3), CLASSIFICATION)
    d = two_col([1, 2, 3], [4, 5, 6])
    with pytest.raises(ValueError):
        d.X[0, 0] = 99.0


# ---- operators -------------------------------------------------------------


def test_unary_examples():
    assert apply_operator(op("square"), [np.array([1.0, 2, 3])]).tolist() == [1, 4, 9]
    assert apply_operator(op("normalize"), [np.array([2.0, 4, 6])]).tolist() == [0, 0.5, 1]
    assert apply_operator(op("normalize"), [np.array([3.0, 3, 3])]).tolist() == [0, 0, 0]


def test_quantile_average_rank():
    got = apply_operator(op("quantile"), [np.array([5.0, 5, 10])])
    assert got.tolist() == pytest.approx([0.25, 0.25, 1.0], abs=1e-15)
    x = np.array([3.0, 1, 4, 1, 5, 9, 2, 6, 5, 3])
    assert apply_operator(op("quantile"), [x]) == pytest.approx(average_rank_quantiles(x.tolist()), abs=1e-15)


@pytest.mark.parametrize("name, x, nan_at", [
    ("sqrt", [-1.0, 4.0], [0]),
    ("log", [0.0, -2.0, math.e], [0, 1]),
    ("reciprocal", [0.0, 1e-13, 2.0], [0, 1]),
])
def test_domain_guards(name, x, nan_at):
    out = apply_operator(op(name), [np.array(x)])
    assert np.flatnonzero(np.isnan(out)).tolist() == nan_at


def test_overflow_becomes_nan():
    out = apply_operator(op("cube"), [np.array([1e200, 2.0])])
    assert math.isnan(out[0]) and out[1] == 8.0


def test_standard_uses_finite_entries():
    out = apply_operator(op("standard"), [np.array([1.0, np.nan, 3.0])])
    assert out[0] == pytest.approx(-1.0) and out[2] == pytest.approx(1.0) and math.isnan(out[1])


def test_arity_and_length_checks():
    with pytest.raises(ArityMismatch):
        apply_operator(op("plus"), [np.ones(2)])
    with pytest.raises(LengthMismatch):
        apply_operator(op("plus"), [np.ones(2), np.ones(3)])


# ---- execution ---------------------------------------------------------------


def test_execute_combination_examples():
    d = two_col([1.0, 2.0], [3.0, 4.0])
    out = execute_combination(parse_sequence("f1,f2,+").combinations[0], d)
    assert out.values.tolist() == [4.0, 6.0] and out.nan_ratio == 0.0 and not out.has_inf
    d = two_col([1.0, 2.0], [0.0, 1.0])
    out = execute_combination(parse_sequence("f1,f2,/").combinations[0], d)
    assert math.isnan(out.values[0]) and out.values[1] == 2.0 and out.nan_ratio == 0.5


def test_execute_combination_flags_overflow():
    d = two_col([1e200, 1.0], [1.0, 2.0])
    out = execute_combination(parse_sequence("f1,cube").combinations[0], d)
    assert out.has_inf and out.nan_ratio == 0.5


def test_execute_sequence_modes():
    d = two_col([1.0, 2.0, 4.0], [3.0, 5.0, 4.0])
    seq = parse_sequence("f1,f2,*")
    app = execute_sequence(seq, d)
    assert app.n_features == 3 and app.feature_names[-1] == "(f1*f2)"
    assert app.X[:, 2].tolist() == [3.0, 10.0, 16.0]
    rep = execute_sequence(seq, d, mode="replace")
    assert rep.n_features == 1 and rep.y is d.y or np.array_equal(rep.y, d.y)
    assert d.n_features == 2  # input untouched


def test_execute_sequence_imputes_median():
    d = two_col([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 2.0, 4.0])
    out = execute_sequence(parse_sequence("f1,f2,/"), d, mode="replace")
    # finite values 1, 1.5, 1 -> median 1
    assert out.X[:, 0].tolist() == [1.0, 1.0, 1.5, 1.0]


def test_execute_sequence_degenerate():
    d = two_col([1.0, 2.0, 3.0], [1.0, 2.0, 5.0])
    with pytest.raises(DegenerateColumn) as info:
        execute_sequence(parse_sequence("f1,f2,+,<SEP>,f1,f1,-"), d)
    assert info.value.combination_index == 1
    with pytest.raises(DegenerateColumn):
        execute_sequence(parse_sequence("f1,f1,-,log"), d)


def test_impute_median():
    assert impute_median(np.array([np.nan, np.nan])) is None
    assert impute_median(np.array([1.0, np.nan, 3.0])).tolist() == [1.0, 2.0, 3.0]
