"""Library refinement: validity checks, outlier filtering, CoT trajectories
and policy-driven enhancement."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateColumn, FTEvolveError, InsufficientExperiences, PolicyUnavailable
from .evaluation import EvaluationConfig, cross_validated_score
from .expr import (
    DEFAULT_OPERATORS,
    Combination,
    OperatorSet,
    TransformationSequence,
    render_sequence,
    validate_structure,
)
from .library import Experience, SelectionParams, greedy_select
from .policy import ENHANCE_INSTRUCTION, GenerationRules, SamplingSettings, build_prompt, parse_response
from .table import STD_FLOOR, Dataset, execute_combination, execute_sequence, impute_median

SYNTACTIC = "Syntactic"
STABILITY = "Stability"
UTILITY = "Utility"


@dataclass(frozen=True)
class CheckThresholds:
    max_nan_ratio: float = 0.05
    min_column_std: float = 1e-12
    utility_folds: int = 5
    utility_fail_folds: int = 4

    def __post_init__(self):
        if min(self.max_nan_ratio, self.min_column_std, self.utility_folds, self.utility_fail_folds) < 0:
            raise ValueError("thresholds must be non-negative")
        if self.utility_fail_folds > self.utility_folds:
            raise ValueError("utility_fail_folds cannot exceed utility_folds")


@dataclass(frozen=True)
class Reason:
    kind: str  # Syntactic, Stability or Utility
    message: str
    combination: int | None = None


@dataclass(frozen=True)
class Verdict:
    reasons: tuple[Reason, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.reasons

    def kinds(self) -> set[str]:
        return {r.kind for r in self.reasons}

    def summary(self) -> str:
        return "; ".join(f"{r.kind}: {r.message}" for r in self.reasons)


def check_combination(
    comb: Combination,
    d: Dataset,
    th: CheckThresholds = CheckThresholds(),
    with_utility: bool = False,
    eval_cfg: EvaluationConfig = EvaluationConfig(),
    ops: OperatorSet = DEFAULT_OPERATORS,
    index: int | None = None,
) -> Verdict:
    diags = validate_structure(TransformationSequence((comb,)), ops, d.n_features)
    if diags:
        return Verdict(tuple(Reason(SYNTACTIC, f"{g.kind}: {g.message}", index) for g in diags))

    outcome = execute_combination(comb, d, ops)
    reasons = []
    if outcome.nan_ratio > th.max_nan_ratio:
        reasons.append(Reason(STABILITY, f"NaN ratio {outcome.nan_ratio:.3f} exceeds {th.max_nan_ratio}", index))
    if outcome.has_inf:
        reasons.append(Reason(STABILITY, "overflow to infinity", index))
    col = impute_median(outcome.values)
    if col is None or float(col.std()) < max(th.min_column_std, STD_FLOOR):
        reasons.append(Reason(STABILITY, "zero variance after imputation", index))
    if reasons or not with_utility:
        return Verdict(tuple(reasons))

    cfg = replace(eval_cfg, folds=th.utility_folds)
    base = cross_validated_score(d, cfg).fold_values
    extended = d.with_features(d.feature_names + (comb.infix(ops),), np.column_stack([d.X, col]))
    trial = cross_validated_score(extended, cfg).fold_values
    losses = sum(1 for b, t in zip(base, trial) if t < b)
    if losses >= th.utility_fail_folds:
        reasons.append(Reason(UTILITY, f"lowers the score in {losses} of {len(base)} folds", index))
    return Verdict(tuple(reasons))


def check_sequence(
    seq: TransformationSequence,
    d: Dataset,
    th: CheckThresholds = CheckThresholds(),
    with_utility: bool = False,
    eval_cfg: EvaluationConfig = EvaluationConfig(),
    ops: OperatorSet = DEFAULT_OPERATORS,
) -> Verdict:
    seq_diags = [g for g in validate_structure(seq, ops, d.n_features) if g.combination is None]
    reasons = [Reason(SYNTACTIC, f"{g.kind}: {g.message}") for g in seq_diags]
    for i, comb in enumerate(seq.combinations):
        verdict = check_combination(comb, d, th, with_utility, eval_cfg, ops, index=i)
        reasons.extend(verdict.reasons)
    if not reasons:
        try:
            execute_sequence(seq, d, ops=ops)
        except DegenerateColumn as exc:
            reasons.append(Reason(STABILITY, str(exc), exc.combination_index))
        except FTEvolveError as exc:
            reasons.append(Reason(SYNTACTIC, str(exc)))
    return Verdict(tuple(reasons))


def filter_outliers(experiences: Sequence[Experience]) -> list[Experience]:
    """Drop scores below the Tukey lower fence; the best experience always stays."""
    experiences = list(experiences)
    if len(experiences) < 4:
        return experiences
    scores = np.array([e.value for e in experiences])
    q1, q3 = np.percentile(scores, [25, 75])
    fence = q1 - 1.5 * (q3 - q1)
    top = int(np.argmax(scores))
    return [e for i, e in enumerate(experiences) if e.value >= fence or i == top]


@dataclass(frozen=True)
class CoTTrajectory:
    steps: tuple[Experience, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def scores(self) -> list[float]:
        return [e.value for e in self.steps]


def build_trajectory(
    experiences: Sequence[Experience],
    k: int = 5,
    params: SelectionParams | None = None,
    max_steps: int = 5,
    min_steps: int = 2,
) -> CoTTrajectory:
    """Select up to ``k`` experiences and order them worst to best."""
    pool = filter_outliers(experiences)
    if len(pool) < min_steps:
        raise InsufficientExperiences(f"need {min_steps} experiences after filtering, have {len(pool)}")
    k = max(min_steps, min(k, len(pool), max_steps))
    params = params or SelectionParams()
    chosen = greedy_select(pool, SelectionParams(k, params.lam, params.mu))
    position = {id(e): i for i, e in enumerate(pool)}
    chosen.sort(key=lambda e: (e.value, position[id(e)]))
    return CoTTrajectory(tuple(chosen))


@dataclass
class Rejection:
    pair: int
    call: int
    reason: str
    text: str = ""


@dataclass
class EnhancementResult:
    kept: list[Experience] = field(default_factory=list)
    rejected: list[Rejection] = field(default_factory=list)


def enhance_trajectory(
    traj: CoTTrajectory,
    policy,
    d: Dataset,
    eval_cfg: EvaluationConfig = EvaluationConfig(),
    th: CheckThresholds = CheckThresholds(),
    rules: GenerationRules | None = None,
    settings: SamplingSettings = SamplingSettings(),
    variants_per_pair: int = 1,
    seed: int = 0,
    iteration: int = 0,
) -> EnhancementResult:
    """Ask the policy for gap-filling variants between adjacent steps.

    A variant survives if it passes the sequence check, is new, and scores at
    least as well as the lower step of its pair.
    """
    if policy is None:
        raise PolicyUnavailable("enhancement needs a generation policy")
    rules = rules or GenerationRules(feature_count=d.n_features)
    result = EnhancementResult()
    seen = {e.canonical for e in traj.steps}
    for p, (lo, hi) in enumerate(zip(traj.steps, traj.steps[1:])):
        prompt = build_prompt(CoTTrajectory((lo, hi)), d, rules, ENHANCE_INSTRUCTION)
        for c in range(variants_per_pair):
            text = policy.generate(prompt, settings, seed * 1_000_003 + p * 1_009 + c)
            try:
                seq = parse_response(text, rules)
            except FTEvolveError as exc:
                result.rejected.append(Rejection(p, c, exc.tag, text))
                continue
            verdict = check_sequence(seq, d, th, eval_cfg=eval_cfg)
            if not verdict.passed:
                result.rejected.append(Rejection(p, c, verdict.summary(), text))
                continue
            if render_sequence(seq) in seen:
                result.rejected.append(Rejection(p, c, "Duplicate", text))
                continue
            exp = Experience(seq, cross_validated_score(execute_sequence(seq, d), eval_cfg),
                             lo.dataset, "enhancement", iteration)
            if exp.value < lo.value:
                result.rejected.append(Rejection(p, c, f"BelowLowerStep: {exp.value:.4f} < {lo.value:.4f}", text))
                continue
            seen.add(exp.canonical)
            result.kept.append(exp)
    return result
