"""Reward-driven exploration that seeds the experience library.

A contextless three-head epsilon-greedy agent picks (head feature, operator,
tail feature). Features may be original columns or columns generated earlier
in the episode, so combinations nest. The reward of a step is the change in
downstream score it causes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateColumn, EvaluationFailure, FTEvolveError
from .evaluation import EvaluationConfig, Score, cross_validated_score
from .expr import DEFAULT_OPERATORS, Combination, Feature, Op, OperatorSet, TransformationSequence, render_sequence
from .library import DatasetSignature, Experience
from .refine import CheckThresholds, check_combination
from .table import Dataset, execute_sequence


@dataclass(frozen=True)
class ExplorerConfig:
    episodes: int = 50
    steps_per_episode: int = 4
    epsilon_start: float = 0.9
    epsilon_end: float = 0.1
    epsilon_decay: float = 0.95
    seed: int = 0
    keep_top: int | None = None  # None keeps one per episode at most
    penalty: float = 0.01
    retries: int = 3

    def __post_init__(self):
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ValueError("episodes and steps_per_episode must be >= 1")

    def epsilon(self, episode: int) -> float:
        return max(self.epsilon_end, self.epsilon_start * self.epsilon_decay**episode)


class ActionValueTable:
    """Incremental-mean value estimates and visit counts for one head."""

    def __init__(self, size: int):
        self.values = np.zeros(size)
        self.counts = np.zeros(size, dtype=np.int64)

    def update(self, action: int, reward: float) -> None:
        self.counts[action] += 1
        self.values[action] += (reward - self.values[action]) / self.counts[action]

    def greedy(self, limit: int | None = None) -> int:
        v = self.values if limit is None else self.values[:limit]
        return int(np.argmax(v))  # first maximum wins


@dataclass
class ActionTables:
    head: ActionValueTable
    operator: ActionValueTable
    tail: ActionValueTable

    @classmethod
    def create(cls, max_features: int, n_ops: int) -> "ActionTables":
        return cls(ActionValueTable(max_features), ActionValueTable(n_ops), ActionValueTable(max_features))


@dataclass(frozen=True)
class Action:
    head: int
    operator: str
    tail: int | None = None


def select_action(
    tables: ActionTables,
    epsilon: float,
    rng: np.random.Generator,
    current_feature_count: int,
    ops: OperatorSet = DEFAULT_OPERATORS,
) -> Action:
    """Epsilon-greedy per head; the tail is drawn only for binary operators."""
    if current_feature_count < 1:
        raise ValueError("need at least one feature")

    def pick(table: ActionValueTable, n: int) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(n))
        return table.greedy(n)

    head = pick(tables.head, current_feature_count)
    op = ops.operators[pick(tables.operator, len(ops))]
    tail = pick(tables.tail, current_feature_count) if op.arity == 2 else None
    return Action(head, op.name, tail)


@dataclass
class EpisodeTrace:
    episode: int
    baseline: float
    rewards: list[float] = field(default_factory=list)
    penalties: int = 0
    combinations: list[Combination] = field(default_factory=list)
    final_score: Score | None = None


@dataclass
class ExplorationResult:
    baseline: Score
    experiences: list[Experience]
    episodes: list[EpisodeTrace]


def _update(tables: ActionTables, action: Action, ops: OperatorSet, reward: float) -> None:
    tables.head.update(action.head, reward)
    tables.operator.update(ops.names.index(action.operator), reward)
    if action.tail is not None:
        tables.tail.update(action.tail, reward)


def explore(
    d: Dataset,
    eval_cfg: EvaluationConfig = EvaluationConfig(),
    cfg: ExplorerConfig = ExplorerConfig(),
    th: CheckThresholds = CheckThresholds(),
    ops: OperatorSet = DEFAULT_OPERATORS,
) -> ExplorationResult:
    """Run all episodes and return the distinct episode outcomes ranked by score."""
    n0 = d.n_features
    tables = ActionTables.create(n0 + cfg.steps_per_episode, len(ops))
    cache: dict[str, Score] = {}

    def score_of(combos: list[Combination], where: str) -> Score:
        seq = TransformationSequence(tuple(combos))
        key = render_sequence(seq)
        if key not in cache:
            try:
                cache[key] = cross_validated_score(execute_sequence(seq, d, ops=ops), eval_cfg)
            except DegenerateColumn:
                raise
            except FTEvolveError as exc:
                raise EvaluationFailure(f"{where}: {exc}") from exc
        return cache[key]

    try:
        baseline = cross_validated_score(d, eval_cfg)
    except FTEvolveError as exc:
        raise EvaluationFailure(f"baseline evaluation: {exc}") from exc

    traces = []
    for ep in range(cfg.episodes):
        rng = np.random.default_rng([cfg.seed, ep])
        eps = cfg.epsilon(ep)
        trace = EpisodeTrace(ep, baseline.value)
        combos: list[Combination] = []
        current = baseline
        for step in range(cfg.steps_per_episode):
            reward = 0.0
            for _ in range(1 + cfg.retries):
                action = select_action(tables, eps, rng, n0 + len(combos), ops)

                def operand(i: int) -> tuple:
                    return (Feature(i),) if i < n0 else combos[i - n0].tokens

                tokens = operand(action.head)
                if action.tail is not None:
                    tokens += operand(action.tail)
                comb = Combination(tokens + (Op(action.operator),))
                ok = comb not in combos and check_combination(comb, d, th, ops=ops).passed
                if ok:
                    try:
                        new = score_of(combos + [comb], f"episode {ep}, step {step}")
                    except DegenerateColumn:
                        ok = False
                if not ok:
                    trace.penalties += 1
                    _update(tables, action, ops, -cfg.penalty)
                    continue
                reward = new.value - current.value
                _update(tables, action, ops, reward)
                combos.append(comb)
                current = new
                break
            trace.rewards.append(reward)
        trace.combinations = combos
        trace.final_score = current
        traces.append(trace)

    sig = DatasetSignature.of(d)
    best: dict[str, tuple[float, int, Experience]] = {}
    for trace in traces:
        if not trace.combinations:
            continue
        exp = Experience(TransformationSequence(tuple(trace.combinations)), trace.final_score, sig, "rl", 0)
        if exp.canonical not in best:
            best[exp.canonical] = (-exp.value, trace.episode, exp)
    ranked = [item[2] for item in sorted(best.values(), key=lambda t: (t[0], t[1]))]
    if cfg.keep_top is not None:
        ranked = ranked[: cfg.keep_top]
    return ExplorationResult(baseline, ranked, traces)


def run_exploration(
    d: Dataset,
    eval_cfg: EvaluationConfig = EvaluationConfig(),
    cfg: ExplorerConfig = ExplorerConfig(),
    th: CheckThresholds = CheckThresholds(),
    ops: OperatorSet = DEFAULT_OPERATORS,
) -> list[Experience]:
    return explore(d, eval_cfg, cfg, th, ops).experiences
