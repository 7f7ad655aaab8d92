"""Datasets and the stack executor that turns sequences into columns.

Every operator is total over float vectors: invalid inputs (negative sqrt,
non-positive log, near-zero denominators) and overflow yield NaN rather than
raising, so callers can gate on the NaN ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    ArityMismatch,
    DegenerateColumn,
    InvalidDataset,
    LengthMismatch,
    MissingTarget,
    NonNumericCell,
    TooFewRows,
)
from .expr import (
    DEFAULT_OPERATORS,
    Combination,
    Feature,
    OperatorDescriptor,
    OperatorSet,
    TransformationSequence,
    raise_for,
    validate_structure,
)

DENOMINATOR_EPS = 1e-12
STD_FLOOR = 1e-12

CLASSIFICATION = "classification"
REGRESSION = "regression"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    feature_names: tuple[str, ...]
    X: np.ndarray  # (rows, features), float64
    y: np.ndarray
    task: str

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.y)
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise InvalidDataset(f"unknown task {self.task!r}")
        if X.shape[0] != y.shape[0]:
            raise LengthMismatch(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if X.shape[0] < 2:
            raise TooFewRows(f"dataset needs at least 2 rows, got {X.shape[0]}")
        if len(self.feature_names) != X.shape[1]:
            raise InvalidDataset("feature_names does not match the column count")
        if self.task == CLASSIFICATION:
            yf = np.asarray(y, dtype=float)
            if not np.all(np.isfinite(yf)) or not np.all(yf == np.round(yf)):
                raise InvalidDataset("classification targets must be integer labels")
            y = yf.astype(np.int64)
            if np.unique(y).size < 2:
                raise InvalidDataset("classification needs at least 2 distinct classes")
        else:
            y = np.asarray(y, dtype=float)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def column(self, i: int) -> np.ndarray:
        return self.X[:, i]

    def with_features(self, names: Sequence[str], X: np.ndarray) -> "Dataset":
        return Dataset(self.name, tuple(names), X, self.y, self.task)


@dataclass(frozen=True, eq=False)
class TransformOutcome:
    values: np.ndarray
    nan_ratio: float
    has_inf: bool


def load_csv(path, target: str | None = None, task: str = REGRESSION, name: str | None = None) -> Dataset:
    """Read a numeric CSV with a header row; the target defaults to the last column."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise TooFewRows(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if target is None:
        t_idx = len(header) - 1
    elif target in header:
        t_idx = header.index(target)
    else:
        raise MissingTarget(f"{path}: no column named {target!r}")
    if len(body) < 2:
        raise TooFewRows(f"{path}: need at least 2 data rows, found {len(body)}")

    data = np.empty((len(body), len(header)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InvalidDataset(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for c, cell in enumerate(row):
            try:
                data[r - 2, c] = float(cell)
            except ValueError:
                raise NonNumericCell(r, header[c], cell) from None
    feat_idx = [i for i in range(len(header)) if i != t_idx]
    return Dataset(
        name=name or path.stem,
        feature_names=tuple(header[i] for i in feat_idx),
        X=data[:, feat_idx],
        y=data[:, t_idx],
        task=task,
    )


def _finite_stats(x: np.ndarray):
    finite = np.isfinite(x)
    return x[finite], finite


def _standard(x):
    vals, _ = _finite_stats(x)
    if vals.size == 0:
        return np.full_like(x, np.nan)
    std = max(float(vals.std()), STD_FLOOR)
    return (x - vals.mean()) / std


def _normalize(x):
    vals, _ = _finite_stats(x)
    if vals.size == 0:
        return np.full_like(x, np.nan)
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        return np.where(np.isnan(x), np.nan, 0.0)
    return (x - lo) / (hi - lo)


def _quantile(x):
    out = np.full_like(x, np.nan)
    vals, finite = _finite_stats(x)
    if vals.size == 1:
        out[finite] = 0.0
    elif vals.size > 1:
        out[finite] = (rankdata(vals, method="average") - 1.0) / (vals.size - 1)
    return out


def _guarded_divide(a, b):
    safe = np.abs(b) >= DENOMINATOR_EPS
    return np.divide(a, b, out=np.full_like(a, np.nan), where=safe & ~np.isnan(b))


_KERNELS = {
    "sqrt": lambda x: np.sqrt(np.where(x >= 0, x, np.nan)),
    "square": np.square,
    "cube": lambda x: x * x * x,
    "reciprocal": lambda x: _guarded_divide(np.ones_like(x), x),
    "log": lambda x: np.log(np.where(x > 0, x, np.nan)),
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "standard": _standard,
    "normalize": _normalize,
    "quantile": _quantile,
    "plus": np.add,
    "minus": np.subtract,
    "multiply": np.multiply,
    "divide": _guarded_divide,
}


def _apply(op: OperatorDescriptor, inputs: Sequence[np.ndarray]) -> tuple[np.ndarray, bool]:
    if len(inputs) != op.arity:
        raise ArityMismatch(f"{op.name} takes {op.arity} input(s), got {len(inputs)}")
    arrays = [np.asarray(v, dtype=float) for v in inputs]
    if op.arity == 2 and arrays[0].shape != arrays[1].shape:
        raise LengthMismatch(f"{op.name}: input lengths {arrays[0].shape} and {arrays[1].shape} differ")
    kernel = _KERNELS.get(op.name)
    if kernel is None:
        raise ArityMismatch(f"no kernel for operator {op.name!r}")
    with np.errstate(all="ignore"):
        out = np.asarray(kernel(*arrays), dtype=float)
        nan_in = np.isnan(arrays[0])
        if op.arity == 2:
            nan_in |= np.isnan(arrays[1])
    overflow = bool(np.any(np.isinf(out)))
    out = np.where(np.isfinite(out) & ~nan_in, out, np.nan)
    return out, overflow


def apply_operator(op: OperatorDescriptor, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise operator application; the result never holds +/-inf."""
    return _apply(op, inputs)[0]


def execute_combination(comb: Combination, d: Dataset, ops: OperatorSet = DEFAULT_OPERATORS) -> TransformOutcome:
    diags = validate_structure(
        TransformationSequence((comb,)), ops, d.n_features, max_tokens=max(len(comb), 1)
    )
    if diags:
        raise_for(diags[0])
    stack: list[np.ndarray] = []
    overflow = False
    for tok in comb.tokens:
        if isinstance(tok, Feature):
            stack.append(d.X[:, tok.index])
            continue
        op = ops.lookup(tok.name)
        args = stack[-op.arity:]
        del stack[-op.arity:]
        out, ovf = _apply(op, args)
        overflow |= ovf
        stack.append(out)
    values = stack[0].astype(float, copy=True)
    return TransformOutcome(values, float(np.isnan(values).sum()) / values.size, overflow)


def impute_median(values: np.ndarray) -> np.ndarray | None:
    """Replace NaNs with the median of the finite entries; None if none are finite."""
    finite = np.isfinite(values)
    if not finite.any():
        return None
    if finite.all():
        return values
    return np.where(finite, values, np.median(values[finite]))


def execute_sequence(
    seq: TransformationSequence,
    d: Dataset,
    mode: str = "append",
    ops: OperatorSet = DEFAULT_OPERATORS,
) -> Dataset:
    """Materialise each combination as a column named by its infix form."""
    if mode not in ("append", "replace"):
        raise ValueError(f"unknown mode {mode!r}")
    names, cols = [], []
    for i, comb in enumerate(seq.combinations):
        outcome = execute_combination(comb, d, ops)
        col = impute_median(outcome.values)
        if col is None:
            raise DegenerateColumn(f"combination {i + 1} ({comb.postfix()}) is all NaN", i)
        if float(col.std()) < STD_FLOOR:
            raise DegenerateColumn(f"combination {i + 1} ({comb.postfix()}) has zero variance", i)
        names.append(comb.infix(ops))
        cols.append(col)
    generated = np.column_stack(cols) if cols else np.empty((d.n_rows, 0))
    if mode == "append":
        return d.with_features(d.feature_names + tuple(names), np.hstack([d.X, generated]))
    return d.with_features(tuple(names), generated)
