"""Downstream verification: metrics, fold construction and built-in learners.

The score of a feature set is the fold-averaged F1 (classification) or
1-RAE (regression) of a fixed learner trained on z-scored features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConstantActuals,
    EmptyInput,
    EvaluationError,
    LengthMismatch,
    TooFewClassSamples,
)
from .table import CLASSIFICATION, Dataset

F1 = "f1"
MACRO_F1 = "macro_f1"
ONE_MINUS_RAE = "one_minus_rae"

LEARNERS = ("logistic", "ridge", "knn")


@dataclass(frozen=True)
class Score:
    value: float
    metric: str
    fold_values: tuple[float, ...] = field(default=(), compare=False)
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __float__(self) -> float:
        return self.value

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value}


@dataclass(frozen=True)
class EvaluationConfig:
    folds: int = 5
    seed: int = 0
    learner: str | None = None  # None picks logistic/ridge by task
    alpha: float = 1.0  # ridge strength
    l2: float = 1e-4  # logistic penalty
    learning_rate: float = 0.5
    max_iter: int = 300
    k: int = 5

    def learner_for(self, task: str) -> str:
        if self.learner is not None:
            if self.learner not in LEARNERS:
                raise EvaluationError(f"unknown learner {self.learner!r}")
            if self.learner == "logistic" and task != CLASSIFICATION:
                raise EvaluationError("logistic regression needs a classification task")
            if self.learner == "ridge" and task == CLASSIFICATION:
                raise EvaluationError("ridge regression needs a regression task")
            return self.learner
        return "logistic" if task == CLASSIFICATION else "ridge"


# -- metrics -----------------------------------------------------------------


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise EmptyInput("empty input")
    return a, b


def _binary_f1(pred, labels, positive) -> float:
    tp = int(np.sum((pred == positive) & (labels == positive)))
    fp = int(np.sum((pred == positive) & (labels != positive)))
    fn = int(np.sum((pred != positive) & (labels == positive)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_score(predictions, labels, averaging: str = "binary") -> Score:
    """F1 with the larger label as positive class, or macro-F1 over all classes."""
    pred, labels = _check_pair(predictions, labels)
    classes = np.union1d(np.unique(labels), np.unique(pred))
    if averaging == "binary":
        if classes.size > 2:
            raise EvaluationError(f"binary F1 needs at most 2 classes, got {classes.size}")
        return Score(_binary_f1(pred, labels, classes.max()), F1)
    if averaging == "macro":
        per_class = [_binary_f1(pred, labels, c) for c in classes]
        return Score(sum(per_class) / len(per_class), MACRO_F1)
    raise ValueError(f"unknown averaging {averaging!r}")


def one_minus_rae(predictions, actuals) -> Score:
    pred, real = _check_pair(np.asarray(predictions, float), np.asarray(actuals, float))
    if real.size < 2:
        raise EmptyInput("1-RAE needs at least 2 values")
    denom = float(np.abs(real - real.mean()).sum())
    if denom == 0.0:
        raise ConstantActuals("actual values are constant")
    return Score(1.0 - float(np.abs(pred - real).sum()) / denom, ONE_MINUS_RAE)


# -- folds -------------------------------------------------------------------


def make_folds(d: Dataset, folds: int, seed: int) -> list[np.ndarray]:
    """Test-index arrays forming a disjoint cover of the rows.

    Classification folds are stratified (each class dealt round-robin after a
    seeded shuffle); regression folds are contiguous slices of a shuffle.
    """
    if not 2 <= folds <= d.n_rows:
        raise EvaluationError(f"folds must be in [2, {d.n_rows}], got {folds}")
    rng = np.random.default_rng(seed)
    if d.task != CLASSIFICATION:
        return [np.sort(part) for part in np.array_split(rng.permutation(d.n_rows), folds)]
    buckets: list[list[int]] = [[] for _ in range(folds)]
    offset = 0
    for cls in np.unique(d.y):
        idx = np.flatnonzero(d.y == cls)
        if idx.size < folds:
            raise TooFewClassSamples(f"class {cls} has {idx.size} rows, fewer than {folds} folds")
        for j, row in enumerate(rng.permutation(idx)):
            buckets[(offset + j) % folds].append(int(row))
        offset += idx.size
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]


# -- learners ----------------------------------------------------------------


def _zscore(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (train - mu) / sd, (test - mu) / sd


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _fit_logistic(X, t, cfg: EvaluationConfig):
    n, p = X.shape
    w = np.zeros(p)
    b = 0.0
    for _ in range(cfg.max_iter):
        err = _sigmoid(X @ w + b) - t
        w -= cfg.learning_rate * (X.T @ err / n + cfg.l2 * w)
        b -= cfg.learning_rate * err.mean()
    return w, b


def _predict_logistic(Xtr, ytr, Xte, cfg):
    classes = np.unique(ytr)
    if classes.size == 2:
        w, b = _fit_logistic(Xtr, (ytr == classes[1]).astype(float), cfg)
        return np.where(_sigmoid(Xte @ w + b) > 0.5, classes[1], classes[0])
    probs = np.column_stack(
        [_sigmoid(Xte @ w + b) for w, b in (_fit_logistic(Xtr, (ytr == c).astype(float), cfg) for c in classes)]
    )
    return classes[np.argmax(probs, axis=1)]


def _predict_ridge(Xtr, ytr, Xte, cfg, notes: list[str]):
    ybar = ytr.mean()
    gram = Xtr.T @ Xtr
    rhs = Xtr.T @ (ytr - ybar)
    alpha = cfg.alpha
    for _ in range(8):
        try:
            w = np.linalg.solve(gram + alpha * np.eye(gram.shape[0]), rhs)
            if np.all(np.isfinite(w)):
                break
        except np.linalg.LinAlgError:
            pass
        alpha = max(alpha * 10.0, 1e-6)
        notes.append(f"SingularDesign: ridge alpha raised to {alpha:g}")
    else:
        w = np.zeros(gram.shape[0])
        notes.append("SingularDesign: fell back to the mean predictor")
    return Xte @ w + ybar


def _predict_knn(Xtr, ytr, Xte, cfg, classify: bool):
    k = min(cfg.k, Xtr.shape[0])
    d2 = (Xte**2).sum(1)[:, None] - 2 * Xte @ Xtr.T + (Xtr**2).sum(1)[None, :]
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = ytr[nearest]
    if not classify:
        return votes.mean(axis=1)
    classes = np.unique(ytr)
    counts = (votes[:, :, None] == classes[None, None, :]).sum(axis=1)
    return classes[np.argmax(counts, axis=1)]


def cross_validated_score(d: Dataset, cfg: EvaluationConfig = EvaluationConfig()) -> Score:
    """Cross-validate ``d``; the mean score carries its per-fold values.

    Fold metrics are summed in fold order, so identical inputs give
    bit-identical results.
    """
    learner = cfg.learner_for(d.task)
    classify = d.task == CLASSIFICATION
    n_classes = np.unique(d.y).size if classify else 0
    metric = (F1 if n_classes == 2 else MACRO_F1) if classify else ONE_MINUS_RAE
    notes: list[str] = []
    values = []
    for test_idx in make_folds(d, cfg.folds, cfg.seed):
        train_mask = np.ones(d.n_rows, dtype=bool)
        train_mask[test_idx] = False
        Xtr, Xte = _zscore(d.X[train_mask], d.X[test_idx])
        ytr, yte = d.y[train_mask], d.y[test_idx]
        if learner == "logistic":
            pred = _predict_logistic(Xtr, ytr, Xte, cfg)
        elif learner == "ridge":
            pred = _predict_ridge(Xtr, ytr, Xte, cfg, notes)
        else:
            pred = _predict_knn(Xtr, ytr, Xte, cfg, classify)
        if classify:
            values.append(f1_score(pred, yte, "binary" if n_classes == 2 else "macro").value)
        else:
            try:
                values.append(one_minus_rae(pred, yte).value)
            except ConstantActuals:
                values.append(0.0)
                notes.append("ConstantActuals: fold scored 0")
    total = 0.0
    for v in values:
        total += v
    return Score(total / len(values), metric, tuple(values), tuple(notes))

