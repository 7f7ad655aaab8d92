import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ft_evolve.evaluation import Score
from ft_evolve.expr import DEFAULT_OPERATORS, parse_sequence
from ft_evolve.library import DatasetSignature, Experience
from ft_evolve.synthetic import ratio_dataset
from ft_evolve.table import REGRESSION, Dataset

SIG = DatasetSignature("fixture", 5, 100, REGRESSION, "0" * 16)


def make_experience(text: str, score: float, sig: DatasetSignature = SIG, origin: str = "rl") -> Experience:
    seq = parse_sequence(text, DEFAULT_OPERATORS, sig.features)
    return Experience(seq, Score(score, "one_minus_rae"), sig, origin)


@pytest.fixture
def exp():
    return make_experience


@pytest.fixture(scope="session")
def ratio():
    return ratio_dataset()


@pytest.fixture
def small_table():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 3))
    y = X[:, 0] * 2 - X[:, 1] + rng.normal(0, 0.1, 60)
    return Dataset("small", ("a", "b", "c"), X, y, REGRESSION)


# ---- one PASS/FAIL line per acceptance criterion -------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        prev = _ACCEPTANCE.get(n)
        if prev is None or prev[0] == "PASS":
            _ACCEPTANCE[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{status}  criterion {n:>2}: {title}")
