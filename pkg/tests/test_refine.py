import numpy as np
import pytest

from conftest import make_experience
from oracles import linear_quartiles
from ft_evolve.errors import InsufficientExperiences, PolicyUnavailable
from ft_evolve.evaluation import cross_validated_score
from ft_evolve.expr import Combination, Feature, Op, parse_sequence
from ft_evolve.library import DatasetSignature, Experience, SelectionParams
from ft_evolve.policy import wrap_sequence
from ft_evolve.refine import (
    STABILITY,
    SYNTACTIC,
    UTILITY,
    CheckThresholds,
    CoTTrajectory,
    build_trajectory,
    check_combination,
    check_sequence,
    enhance_trajectory,
    filter_outliers,
)
from ft_evolve.table import REGRESSION, Dataset, execute_sequence


def comb(text):
    return parse_sequence(text).combinations[0]


@pytest.fixture
def zeros_table():
    rng = np.random.default_rng(0)
    X = rng.uniform(1, 2, size=(100, 2))
    X[:10, 1] = 0.0  # 10% zeros in f2
    return Dataset("z", ("a", "b"), X, rng.normal(size=100), REGRESSION)


# ---- checks ------------------------------------------------------------------


def test_check_combination_cases(zeros_table):
    assert check_combination(comb("f1,f2,+"), zeros_table).passed
    v = check_combination(comb("f1,f2,/"), zeros_table)
    assert not v.passed and v.kinds() == {STABILITY}
    assert "NaN ratio 0.100" in v.summary()
    v = check_combination(comb("f1,f1,-"), zeros_table)
    assert v.kinds() == {STABILITY} and "zero variance" in v.summary()
    v = check_combination(comb("f1,f2,/"), zeros_table, CheckThresholds(max_nan_ratio=0.2))
    assert v.passed


def test_check_combination_syntactic(zeros_table):
    bad = Combination((Feature(0), Op("minus")))
    assert check_combination(bad, zeros_table).kinds() == {SYNTACTIC}
    far = Combination((Feature(7), Op("sqrt")))
    assert check_combination(far, zeros_table).kinds() == {SYNTACTIC}


def test_check_overflow(zeros_table):
    X = zeros_table.X.copy()
    X[0, 0] = 1e120
    d = zeros_table.with_features(("a", "b"), X)
    v = check_combination(comb("f1,cube"), d, CheckThresholds(max_nan_ratio=1.0))
    assert "overflow" in v.summary()


def test_check_sequence_names_the_offender(zeros_table):
    ok = parse_sequence("f1,f2,+,<SEP>,f1,sqrt")
    assert check_sequence(ok, zeros_table).passed
    bad = parse_sequence("f1,f2,+,<SEP>,f1,f1,-,<SEP>,f2,f1,*")
    v = check_sequence(bad, zeros_table)
    assert not v.passed
    assert [r.combination for r in v.reasons] == [1]


def test_utility_check(ratio):
    useful = check_combination(comb("f1,f2,/"), ratio, with_utility=True)
    assert useful.passed


@pytest.mark.parametrize("trial, fails", [
    ((0.4, 0.4, 0.4, 0.4, 0.6), True),   # worse in 4 of 5 folds
    ((0.4, 0.4, 0.4, 0.6, 0.6), False),  # worse in only 3
])
def test_utility_counts_losing_folds(ratio, monkeypatch, trial, fails):
    from ft_evolve import refine
    from ft_evolve.evaluation import Score

    def fake(d, cfg):
        folds = (0.5,) * 5 if d.n_features == ratio.n_features else trial
        return Score(sum(folds) / 5, "one_minus_rae", folds)

    monkeypatch.setattr(refine, "cross_validated_score", fake)
    v = check_combination(comb("f3,f4,*"), ratio, with_utility=True)
    assert (v.kinds() == {UTILITY}) is fails
    if fails:
        assert "4 of 5 folds" in v.summary()


# ---- outliers ----------------------------------------------------------------


def exps(scores):
    return [make_experience(f"f{i % 5 + 1},sqrt" + ",sqrt" * (i // 5), s) for i, s in enumerate(scores)]


def test_filter_outliers_fixtures():
    kept = filter_outliers(exps([0.70, 0.71, 0.72, 0.73]))
    assert len(kept) == 4
    five = exps([0.70, 0.71, 0.72, 0.73, 0.10])
    q1, q3 = linear_quartiles([e.value for e in five])
    fence = q1 - 1.5 * (q3 - q1)
    assert 0.10 < fence < 0.70
    assert [e.value for e in filter_outliers(five)] == [0.70, 0.71, 0.72, 0.73]
    three = exps([0.9, 0.1, 0.5])
    assert filter_outliers(three) == three


# ---- trajectories --------------------------------------------------------------


def test_trajectory_is_ascending():
    traj = build_trajectory(exps([0.6, 0.8, 0.7]), k=3)
    assert traj.scores() == [0.6, 0.7, 0.8]


def test_trajectory_without_diversity_is_top_two():
    traj = build_trajectory(exps([0.6, 0.8, 0.7, 0.5]), k=2, params=SelectionParams(2, 0.0, 0.0))
    assert traj.scores() == [0.7, 0.8]


def test_trajectory_ties_keep_library_order():
    pool = exps([0.5, 0.5, 0.5])
    a = build_trajectory(pool, k=3, params=SelectionParams(3, 0.0, 0.0))
    b = build_trajectory(pool, k=3, params=SelectionParams(3, 0.0, 0.0))
    assert [e.canonical for e in a.steps] == [e.canonical for e in pool]
    assert a == b


def test_trajectory_limits():
    with pytest.raises(InsufficientExperiences):
        build_trajectory(exps([0.5]))
    assert len(build_trajectory(exps([0.5] * 9), k=8, max_steps=5)) == 5


# ---- enhancement -----------------------------------------------------------------


class Scripted:
    def __init__(self, *texts):
        self.texts = list(texts)
        self.prompts = []

    def generate(self, prompt, settings, seed):
        self.prompts.append(prompt)
        return self.texts.pop(0)


def scored(text, d, origin="rl"):
    seq = parse_sequence(text, feature_count=d.n_features)
    return Experience(seq, cross_validated_score(execute_sequence(seq, d)), DatasetSignature.of(d), origin)


@pytest.fixture(scope="module")
def pair(ratio):
    return CoTTrajectory((scored("f2,log", ratio), scored("f1,f2,sqrt,/", ratio)))


def test_enhance_duplicate_is_dropped(ratio, pair):
    out = enhance_trajectory(pair, Scripted(wrap_sequence(pair.steps[1].sequence)), ratio)
    assert out.kept == [] and [r.reason for r in out.rejected] == ["Duplicate"]


def test_enhance_invalid_is_rejected(ratio, pair):
    out = enhance_trajectory(pair, Scripted("BEGIN_SEQUENCE f1,/ END_SEQUENCE"), ratio)
    assert out.kept == [] and len(out.rejected) == 1
    assert out.rejected[0].reason == "StackUnderflow"


def test_enhance_keeps_a_between_variant(ratio, pair):
    variant = scored("f2,reciprocal", ratio)  # one operator swap away from the lower step
    lo, hi = pair.scores()
    assert lo < variant.value < hi
    policy = Scripted(wrap_sequence(variant.sequence))
    out = enhance_trajectory(pair, policy, ratio)
    assert len(out.kept) == 1
    kept = out.kept[0]
    assert kept.origin == "enhancement" and kept.value == variant.value
    assert "Step 1" in policy.prompts[0].demonstration_block


def test_enhance_rejects_below_lower_step(ratio, pair):
    worse = scored("f3,sqrt", ratio)
    assert worse.value < pair.scores()[0]
    out = enhance_trajectory(pair, Scripted(wrap_sequence(worse.sequence)), ratio)
    assert out.kept == [] and out.rejected[0].reason.startswith("BelowLowerStep")


def test_enhance_needs_a_policy(ratio, pair):
    with pytest.raises(PolicyUnavailable):
        enhance_trajectory(pair, None, ratio)
