"""Experience-conditioned generation: the closed loop and one-shot baselines."""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import EmptyReport, FTEvolveError, InsufficientExperiences
from .evaluation import EvaluationConfig, cross_validated_score
from .expr import DEFAULT_OPERATORS, render_sequence, tokenize
from .library import DatasetSignature, Experience, ExperienceLibrary, SelectionParams, similarity
from .policy import GenerationRules, PromptBundle, SamplingSettings, build_prompt, parse_response
from .refine import CheckThresholds, CoTTrajectory, build_trajectory, check_sequence
from .table import Dataset, execute_sequence

CLOSED_LOOP = "closed_loop"
ONE_SHOT_FIXED = "one_shot_fixed"
ONE_SHOT_RESAMPLE = "one_shot_resample"
MODES = (CLOSED_LOOP, ONE_SHOT_FIXED, ONE_SHOT_RESAMPLE)

SIMPLE_OPERATORS = frozenset({"plus", "minus", "multiply", "divide", "standard", "normalize"})


@dataclass(frozen=True)
class LoopConfig:
    iterations: int = 10
    candidates: int = 10
    keep_top: int = 3
    selection: SelectionParams = field(default_factory=SelectionParams)
    dedup_threshold: float = 0.9
    seed: int = 0
    mode: str = CLOSED_LOOP
    max_steps: int = 5
    jobs: int = 1
    eval: EvaluationConfig = field(default_factory=EvaluationConfig)
    thresholds: CheckThresholds = field(default_factory=CheckThresholds)
    sampling: SamplingSettings = field(default_factory=SamplingSettings)

    def __post_init__(self):
        if self.iterations < 1 or self.candidates < 1:
            raise ValueError("iterations and candidates must be >= 1")
        if self.keep_top < 0:
            raise ValueError("keep_top must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sampling"] = asdict(self.sampling)
        return out


@dataclass
class CallRecord:
    iteration: int
    call: int
    valid: bool
    sequence: str | None = None
    score: float | None = None
    reason: str | None = None
    best_so_far: float | None = None
    kept: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "CallRecord":
        return cls(**{k: obj.get(k) for k in cls.__dataclass_fields__ if k in obj})


@dataclass
class RunReport:
    mode: str
    dataset: DatasetSignature
    feature_names: tuple[str, ...]
    iterations: int
    candidates: int
    records: list[CallRecord] = field(default_factory=list)
    initial_best: Experience | None = None
    final_best: Experience | None = None
    library_version_before: int = 0
    library_version_after: int = 0
    library_size_before: int = 0
    library_size_after: int = 0

    @property
    def best_so_far(self) -> list[float]:
        return [r.best_so_far for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    def summary(self) -> dict:
        def exp(e):
            return None if e is None else {
                "sequence": e.canonical,
                "score": e.score.to_dict(),
                "origin": e.origin,
                "iteration": e.iteration,
            }

        return {
            "mode": self.mode,
            "dataset": self.dataset.to_dict(),
            "feature_names": list(self.feature_names),
            "iterations": self.iterations,
            "candidates": self.candidates,
            "calls": len(self.records),
            "valid_calls": sum(r.valid for r in self.records),
            "initial_best": exp(self.initial_best),
            "final_best": exp(self.final_best),
            "library_version_before": self.library_version_before,
            "library_version_after": self.library_version_after,
            "library_size_before": self.library_size_before,
            "library_size_after": self.library_size_after,
            "stats": behavior_stats(self),
        }

    def save(self, jsonl_path, summary_path) -> None:
        with open(jsonl_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")


def call_seed(seed: int, iteration: int, call: int) -> int:
    return (seed * 1_000_003 + iteration * 10_007 + call) % 2**63


def _rules_for(d: Dataset) -> GenerationRules:
    return GenerationRules(DEFAULT_OPERATORS, d.n_features)


def _trajectory(pool: list[Experience], cfg: LoopConfig) -> CoTTrajectory:
    return build_trajectory(pool, cfg.selection.K, cfg.selection, cfg.max_steps, min_steps=1)


def _resampled_pool(pool: list[Experience], cfg: LoopConfig, iteration: int) -> list[Experience]:
    """A fresh seeded uniform choice of K experiences, in library order."""
    size = min(len(pool), cfg.selection.K)
    rng = np.random.default_rng([cfg.seed, iteration, 0x5E1EC7])
    picked = np.sort(rng.choice(len(pool), size=size, replace=False))
    return [pool[i] for i in picked]


def _run_calls(
    d: Dataset,
    policy,
    prompt: PromptBundle,
    rules: GenerationRules,
    cfg: LoopConfig,
    sig: DatasetSignature,
    iteration: int,
    origin: str,
) -> list[tuple[CallRecord, Experience | None]]:
    def one(call: int):
        try:
            text = policy.generate(prompt, cfg.sampling, call_seed(cfg.seed, iteration, call))
        except FTEvolveError as exc:
            raise type(exc)(f"iteration {iteration}, call {call}: {exc}") from exc
        try:
            seq = parse_response(text, rules)
        except FTEvolveError as exc:
            return CallRecord(iteration, call, False, reason=exc.tag), None
        rendered = render_sequence(seq)
        verdict = check_sequence(seq, d, cfg.thresholds, eval_cfg=cfg.eval)
        if not verdict.passed:
            kinds = sorted(verdict.kinds())
            return CallRecord(iteration, call, False, rendered, reason="+".join(kinds)), None
        try:
            score = cross_validated_score(execute_sequence(seq, d), cfg.eval)
        except FTEvolveError as exc:
            raise type(exc)(f"iteration {iteration}, call {call}: {exc}") from exc
        exp = Experience(seq, score, sig, origin, iteration)
        return CallRecord(iteration, call, True, rendered, score.value), exp

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(one, range(cfg.candidates)))
    return [one(j) for j in range(cfg.candidates)]


def _top_distinct(results, keep: int, threshold: float) -> list[tuple[CallRecord, Experience]]:
    ranked = sorted(
        ((rec, exp) for rec, exp in results if exp is not None),
        key=lambda item: (-item[1].value, item[0].call),
    )
    chosen: list[tuple[CallRecord, Experience]] = []
    for rec, exp in ranked:
        if len(chosen) >= keep:
            break
        if any(exp.canonical == c.canonical or similarity(exp, c) > threshold for _, c in chosen):
            continue
        chosen.append((rec, exp))
    return chosen


def _run(d: Dataset, lib: ExperienceLibrary, policy, cfg: LoopConfig, mode: str) -> RunReport:
    sig = DatasetSignature.of(d)
    rules = _rules_for(d)
    pool = lib.for_dataset(sig)
    if not pool:
        raise InsufficientExperiences(f"library has no experiences for dataset {sig.name!r}")
    report = RunReport(
        mode, sig, d.feature_names, cfg.iterations, cfg.candidates,
        initial_best=lib.best(sig),
        library_version_before=lib.version,
        library_size_before=len(lib),
    )
    best = report.initial_best
    fixed_prompt = build_prompt(_trajectory(pool, cfg), d, rules) if mode == ONE_SHOT_FIXED else None
    origin = "llm"

    for t in range(1, cfg.iterations + 1):
        if mode == CLOSED_LOOP:
            prompt = build_prompt(_trajectory(lib.for_dataset(sig), cfg), d, rules)
        elif mode == ONE_SHOT_RESAMPLE:
            prompt = build_prompt(_trajectory(_resampled_pool(pool, cfg, t), cfg), d, rules)
        else:
            prompt = fixed_prompt
        results = _run_calls(d, policy, prompt, rules, cfg, sig, t, origin)
        for rec, exp in results:
            if exp is not None and exp.value > best.value:
                best = exp
            rec.best_so_far = best.value
            report.records.append(rec)
        if mode == CLOSED_LOOP:
            chosen = _top_distinct(results, cfg.keep_top, cfg.dedup_threshold)
            added = {id(e) for e in lib.write_back([e for _, e in chosen], cfg.dedup_threshold)}
            for rec, exp in chosen:
                rec.kept = id(exp) in added

    report.final_best = lib.best(sig) if mode == CLOSED_LOOP else best
    report.library_version_after = lib.version
    report.library_size_after = len(lib)
    return report


def run_closed_loop(d: Dataset, lib: ExperienceLibrary, policy, cfg: LoopConfig = LoopConfig()) -> RunReport:
    """Generate, verify, rank and write back for ``cfg.iterations`` rounds.

    ``lib`` is updated in place; the report traces every policy call.
    """
    return _run(d, lib, policy, cfg, CLOSED_LOOP)


def run_one_shot(d: Dataset, lib: ExperienceLibrary, policy, cfg: LoopConfig = LoopConfig(), mode: str = "resample") -> RunReport:
    """Same call budget as the closed loop, but the library is never written."""
    mode = {"fixed": ONE_SHOT_FIXED, "resample": ONE_SHOT_RESAMPLE}.get(mode, mode)
    if mode not in (ONE_SHOT_FIXED, ONE_SHOT_RESAMPLE):
        raise ValueError(f"unknown one-shot mode {mode!r}")
    return _run(d, lib, policy, cfg, mode)


def run(d: Dataset, lib: ExperienceLibrary, policy, cfg: LoopConfig = LoopConfig()) -> RunReport:
    if cfg.mode == CLOSED_LOOP:
        return run_closed_loop(d, lib, policy, cfg)
    return run_one_shot(d, lib, policy, cfg, cfg.mode)


def usage_stats(sequences: Iterable[str], feature_count: int) -> dict:
    """Operator and feature usage over postfix texts."""
    op_counts: Counter = Counter()
    feat_counts = [0] * feature_count
    for text in sequences:
        for tok in tokenize(text):
            op = DEFAULT_OPERATORS.lookup(tok)
            if op is not None:
                op_counts[op.name] += 1
            elif tok.startswith("f") and tok[1:].isdigit():
                i = int(tok[1:]) - 1
                if 0 <= i < feature_count:
                    feat_counts[i] += 1
    simple = sum(n for name, n in op_counts.items() if name in SIMPLE_OPERATORS)
    total_ops = sum(op_counts.values())
    total_feats = sum(feat_counts)
    feat_entropy = 0.0
    if total_feats:
        feat_entropy = -sum((c / total_feats) * math.log(c / total_feats) for c in feat_counts if c) + 0.0
    return {
        "operator_counts": {op.name: op_counts.get(op.name, 0) for op in DEFAULT_OPERATORS},
        "simple": simple,
        "complex": total_ops - simple,
        "simple_ratio": simple / total_ops if total_ops else 0.0,
        "feature_counts": feat_counts,
        "feature_entropy": feat_entropy,
    }


def behavior_stats(report: RunReport) -> dict:
    if not report.records:
        raise EmptyReport("report has no call records")
    return usage_stats((r.sequence for r in report.records if r.sequence), len(report.feature_names))
