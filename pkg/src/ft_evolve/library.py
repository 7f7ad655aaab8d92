"""Experience library: storage, diversity measures and context selection."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptySelection, InsufficientExperiences, UnverifiedExperience
from .evaluation import Score
from .expr import DEFAULT_OPERATORS, OperatorSet, TransformationSequence, parse_sequence, render_sequence
from .table import Dataset

SIGNATURE_CLIP = 3
ORIGINS = ("rl", "llm", "enhancement")


@dataclass(frozen=True)
class DatasetSignature:
    name: str
    rows: int
    features: int
    task: str
    columns_hash: str

    @classmethod
    def of(cls, d: Dataset) -> "DatasetSignature":
        digest = hashlib.sha256("\x1f".join(d.feature_names).encode("utf-8")).hexdigest()[:16]
        return cls(d.name, d.n_rows, d.n_features, d.task, digest)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rows": self.rows,
            "features": self.features,
            "task": self.task,
            "columns_hash": self.columns_hash,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetSignature":
        return cls(obj["name"], int(obj["rows"]), int(obj["features"]), obj["task"], obj["columns_hash"])


@dataclass(frozen=True)
class Experience:
    sequence: TransformationSequence
    score: Score
    dataset: DatasetSignature
    origin: str = "rl"
    iteration: int = 0

    @cached_property
    def canonical(self) -> str:
        return render_sequence(self.sequence, "postfix")

    @cached_property
    def combination_set(self) -> frozenset[str]:
        return frozenset(c.postfix() for c in self.sequence.combinations)

    @property
    def value(self) -> float:
        return self.score.value

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "sequence": self.canonical,
            "score": self.score.to_dict(),
            "origin": self.origin,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, obj: dict, ops: OperatorSet = DEFAULT_OPERATORS) -> "Experience":
        sig = DatasetSignature.from_dict(obj["dataset"])
        seq = parse_sequence(obj["sequence"], ops, sig.features, max_combinations=10**6, max_tokens=10**6)
        score = Score(float(obj["score"]["value"]), obj["score"]["metric"])
        return cls(seq, score, sig, obj.get("origin", "rl"), int(obj.get("iteration", 0)))


def signature_of(e: Experience) -> tuple[tuple[str, int], ...]:
    """Order-insensitive structural key: operator histogram clipped at 3."""
    counts = Counter(tok for comb in e.sequence.combinations for tok in comb.operators())
    return tuple(sorted((name, min(n, SIGNATURE_CLIP)) for name, n in counts.items()))


def similarity(e1: Experience, e2: Experience) -> float:
    """Jaccard index of the two sequences' combination strings."""
    a, b = e1.combination_set, e2.combination_set
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def entropy(selection: Sequence[Experience]) -> float:
    if not selection:
        raise EmptySelection("entropy of an empty selection")
    counts = Counter(signature_of(e) for e in selection)
    n = len(selection)
    return -sum((c / n) * math.log(c / n) for c in counts.values()) + 0.0


def redundancy(selection: Sequence[Experience]) -> float:
    """Mean similarity over ordered pairs; 0 for a singleton."""
    if not selection:
        raise EmptySelection("redundancy of an empty selection")
    n = len(selection)
    if n == 1:
        return 0.0
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += similarity(selection[i], selection[j])
    return 2.0 * total / (n * (n - 1))


@dataclass(frozen=True)
class SelectionParams:
    K: int = 5
    lam: float = 0.05
    mu: float = 0.10

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be non-negative")


def objective(selection: Sequence[Experience], lam: float, mu: float) -> float:
    """Mean score plus weighted coverage minus weighted redundancy."""
    quality = sum(e.value for e in selection) / len(selection)
    return quality + lam * entropy(selection) - mu * redundancy(selection)


def greedy_select(candidates: Sequence[Experience], params: SelectionParams) -> list[Experience]:
    """Greedy quality-diversity selection over ``candidates`` in their given order.

    Ties on the objective go to the higher score, then the earlier position.
    """
    if len(candidates) < params.K:
        raise InsufficientExperiences(f"need {params.K} experiences, have {len(candidates)}")
    chosen: list[int] = []
    remaining = list(range(len(candidates)))
    for _ in range(params.K):
        best_key, best_i = None, None
        base = [candidates[i] for i in chosen]
        for i in remaining:
            key = (objective(base + [candidates[i]], params.lam, params.mu), candidates[i].value, -i)
            if best_key is None or key > best_key:
                best_key, best_i = key, i
        chosen.append(best_i)
        remaining.remove(best_i)
    return [candidates[i] for i in chosen]


class ExperienceLibrary:
    """The evolving set of verified experiences.

    Reads work over the current list; :meth:`write_back` is the only mutation
    path and bumps ``version`` exactly once per call.
    """

    def __init__(self, experiences: Iterable[Experience] = (), version: int = 0):
        self.experiences: list[Experience] = []
        self.version = version
        seen = set()
        for e in experiences:
            key = (e.dataset, e.canonical)
            if key not in seen:
                seen.add(key)
                self.experiences.append(e)

    def __len__(self) -> int:
        return len(self.experiences)

    def __iter__(self):
        return iter(self.experiences)

    def for_dataset(self, sig: DatasetSignature) -> list[Experience]:
        return [e for e in self.experiences if e.dataset == sig]

    def best(self, sig: DatasetSignature) -> Experience | None:
        best = None
        for e in self.for_dataset(sig):
            if best is None or e.value > best.value:
                best = e
        return best

    def write_back(self, verified: Iterable[Experience], dedup_threshold: float = 0.9) -> list[Experience]:
        """Merge verified experiences; returns the ones actually added.

        An incoming experience is dropped when its canonical rendering already
        exists for the dataset, or when it is more similar than
        ``dedup_threshold`` to a stored experience that scores at least as well.
        """
        incoming = list(verified)
        for e in incoming:
            if e.score is None or not math.isfinite(e.value):
                raise UnverifiedExperience(f"experience {e.canonical!r} has no verified score")
        added = []
        for e in incoming:
            peers = self.for_dataset(e.dataset)
            if any(p.canonical == e.canonical for p in peers):
                continue
            if any(similarity(e, p) > dedup_threshold and e.value <= p.value for p in peers):
                continue
            self.experiences.append(e)
            added.append(e)
        self.version += 1
        return added

    def replace_dataset(self, sig: DatasetSignature, kept: Iterable[Experience]) -> None:
        """Swap the dataset's experiences for ``kept`` (used by refinement passes)."""
        kept = list(kept)
        others = [e for e in self.experiences if e.dataset != sig]
        self.experiences = []
        seen = set()
        for e in others + kept:
            key = (e.dataset, e.canonical)
            if key not in seen:
                seen.add(key)
                self.experiences.append(e)
        self.version += 1

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {"version": self.version, "experiences": [e.to_dict() for e in self.experiences]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(self.dumps())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def from_dict(cls, obj: dict, ops: OperatorSet = DEFAULT_OPERATORS) -> "ExperienceLibrary":
        return cls((Experience.from_dict(e, ops) for e in obj.get("experiences", [])), int(obj.get("version", 0)))

    @classmethod
    def load(cls, path, ops: OperatorSet = DEFAULT_OPERATORS) -> "ExperienceLibrary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), ops)


def select_context(lib, dataset_sig: DatasetSignature, params: SelectionParams) -> list[Experience]:
    """Choose ``params.K`` experiences of one dataset by greedy quality-diversity."""
    pool = lib.for_dataset(dataset_sig) if isinstance(lib, ExperienceLibrary) else [
        e for e in lib if e.dataset == dataset_sig
    ]
    return greedy_select(pool, params)


def write_back(lib: ExperienceLibrary, verified: Iterable[Experience], dedup_threshold: float = 0.9) -> ExperienceLibrary:
    lib.write_back(verified, dedup_threshold)
    return lib
