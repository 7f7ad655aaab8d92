"""Postfix transformation DSL.

A transformation sequence is a list of combinations; each combination is a
postfix program over original-feature tokens and operators that produces one
new column. The surface syntax is a comma-separated token stream::

    <SOS>,f1,f2,/,<SEP>,f1,sqrt,<EOS>

Feature tokens are 1-based on the surface (``f1`` is the first column) and
0-based internally. ``<SOS>``/``<EOS>`` are accepted but never emitted.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

from .errors import (
    CombinationTooLong,
    EmptySequence,
    FeatureOutOfRange,
    LeftoverOperands,
    SequenceTooLong,
    StackUnderflow,
    UnknownToken,
)

SOS = "<SOS>"
SEP = "<SEP>"
EOS = "<EOS>"

MAX_TOKENS = 15
MAX_COMBINATIONS = 10

_FEATURE_RE = re.compile(r"^f(\d+)$")


@dataclass(frozen=True)
class OperatorDescriptor:
    name: str
    arity: int
    group: str  # "simple" or "complex"
    symbol: str | None = None

    def __post_init__(self):
        if self.arity not in (1, 2):
            raise ValueError(f"operator {self.name!r}: arity must be 1 or 2")
        if self.group not in ("simple", "complex"):
            raise ValueError(f"operator {self.name!r}: unknown group {self.group!r}")

    @property
    def surface(self) -> str:
        return self.symbol or self.name


class OperatorSet:
    """Ordered, name-unique collection of operators."""

    def __init__(self, operators: Iterable[OperatorDescriptor]):
        self.operators = tuple(operators)
        self._by_key: dict[str, OperatorDescriptor] = {}
        for op in self.operators:
            if op.name in self._by_key:
                raise ValueError(f"duplicate operator {op.name!r}")
            self._by_key[op.name] = op
        for op in self.operators:
            if op.symbol:
                self._by_key.setdefault(op.symbol, op)

    def __len__(self) -> int:
        return len(self.operators)

    def __iter__(self):
        return iter(self.operators)

    def __contains__(self, name: str) -> bool:
        return name in self._by_key

    def __eq__(self, other) -> bool:
        return isinstance(other, OperatorSet) and self.operators == other.operators

    def __hash__(self) -> int:
        return hash(self.operators)

    def __repr__(self) -> str:
        return f"OperatorSet({[op.name for op in self.operators]})"

    def lookup(self, key: str) -> OperatorDescriptor | None:
        """Resolve an operator by name or surface symbol."""
        return self._by_key.get(key)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(op.name for op in self.operators)

    @property
    def unary(self) -> tuple[OperatorDescriptor, ...]:
        return tuple(op for op in self.operators if op.arity == 1)

    @property
    def binary(self) -> tuple[OperatorDescriptor, ...]:
        return tuple(op for op in self.operators if op.arity == 2)

    def restrict(self, names: Iterable[str]) -> "OperatorSet":
        wanted = set(names)
        unknown = wanted - set(self.names)
        if unknown:
            raise ValueError(f"unknown operators: {sorted(unknown)}")
        return OperatorSet(op for op in self.operators if op.name in wanted)


UNARY_OPERATORS = (
    OperatorDescriptor("sqrt", 1, "complex"),
    OperatorDescriptor("square", 1, "complex"),
    OperatorDescriptor("cube", 1, "complex"),
    OperatorDescriptor("reciprocal", 1, "complex"),
    OperatorDescriptor("log", 1, "complex"),
    OperatorDescriptor("sin", 1, "complex"),
    OperatorDescriptor("cos", 1, "complex"),
    OperatorDescriptor("tanh", 1, "complex"),
    OperatorDescriptor("sigmoid", 1, "complex"),
    OperatorDescriptor("standard", 1, "simple"),
    OperatorDescriptor("normalize", 1, "simple"),
    OperatorDescriptor("quantile", 1, "complex"),
)
BINARY_OPERATORS = (
    OperatorDescriptor("plus", 2, "simple", "+"),
    OperatorDescriptor("minus", 2, "simple", "-"),
    OperatorDescriptor("multiply", 2, "simple", "*"),
    OperatorDescriptor("divide", 2, "simple", "/"),
)
DEFAULT_OPERATORS = OperatorSet(UNARY_OPERATORS + BINARY_OPERATORS)


@dataclass(frozen=True)
class Feature:
    index: int  # 0-based

    def __str__(self) -> str:
        return f"f{self.index + 1}"


@dataclass(frozen=True)
class Op:
    name: str

    def __str__(self) -> str:
        op = DEFAULT_OPERATORS.lookup(self.name)
        return op.surface if op else self.name


Token = Union[Feature, Op]


@dataclass(frozen=True)
class Combination:
    tokens: tuple[Token, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def features(self) -> list[int]:
        return [t.index for t in self.tokens if isinstance(t, Feature)]

    def operators(self) -> list[str]:
        return [t.name for t in self.tokens if isinstance(t, Op)]

    def postfix(self) -> str:
        return ",".join(str(t) for t in self.tokens)

    def infix(self, ops: OperatorSet = DEFAULT_OPERATORS) -> str:
        stack: list[str] = []
        for tok in self.tokens:
            if isinstance(tok, Feature):
                stack.append(str(tok))
                continue
            op = ops.lookup(tok.name)
            if op is None or len(stack) < op.arity:
                raise StackUnderflow(f"cannot render {self.postfix()!r} as infix")
            if op.arity == 1:
                stack.append(f"{op.name}({stack.pop()})")
            else:
                right, left = stack.pop(), stack.pop()
                stack.append(f"({left}{op.surface}{right})")
        if len(stack) != 1:
            raise LeftoverOperands(f"cannot render {self.postfix()!r} as infix")
        return stack[0]


@dataclass(frozen=True)
class TransformationSequence:
    combinations: tuple[Combination, ...]

    def __post_init__(self):
        object.__setattr__(self, "combinations", tuple(self.combinations))

    def __len__(self) -> int:
        return len(self.combinations)

    def __iter__(self):
        return iter(self.combinations)

    def tokens(self) -> list[Token]:
        return [t for comb in self.combinations for t in comb.tokens]


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    combination: int | None = None


def _stack_check(tokens: Sequence[Token], ops: OperatorSet) -> Diagnostic | None:
    if not tokens:
        return Diagnostic("EmptySequence", "empty combination")
    depth = 0
    for pos, tok in enumerate(tokens):
        if isinstance(tok, Feature):
            depth += 1
            continue
        op = ops.lookup(tok.name)
        if op is None:
            return Diagnostic("UnknownToken", f"unknown operator {tok.name!r}")
        if depth < op.arity:
            return Diagnostic(
                "StackUnderflow",
                f"operator {op.name!r} at position {pos} needs {op.arity} operand(s), found {depth}",
            )
        depth -= op.arity - 1
    if depth != 1:
        return Diagnostic("LeftoverOperands", f"{depth} values left on the stack")
    return None


def validate_structure(
    seq: TransformationSequence,
    ops: OperatorSet = DEFAULT_OPERATORS,
    feature_count: int | None = None,
    max_combinations: int = MAX_COMBINATIONS,
    max_tokens: int = MAX_TOKENS,
) -> list[Diagnostic]:
    """Return every structural problem with ``seq``; empty means valid."""
    diags: list[Diagnostic] = []
    if len(seq) == 0:
        diags.append(Diagnostic("EmptySequence", "sequence has no combinations"))
    elif len(seq) > max_combinations:
        diags.append(
            Diagnostic("SequenceTooLong", f"{len(seq)} combinations exceed the limit of {max_combinations}")
        )
    for i, comb in enumerate(seq.combinations):
        if len(comb) > max_tokens:
            diags.append(
                Diagnostic("CombinationTooLong", f"{len(comb)} tokens exceed the limit of {max_tokens}", i)
            )
        bad = _stack_check(comb.tokens, ops)
        if bad is not None:
            diags.append(Diagnostic(bad.kind, bad.message, i))
        if feature_count is not None:
            for idx in comb.features():
                if not 0 <= idx < feature_count:
                    diags.append(
                        Diagnostic(
                            "FeatureOutOfRange",
                            f"f{idx + 1} is outside the {feature_count} available features",
                            i,
                        )
                    )
    return diags


_ERRORS = {
    "EmptySequence": EmptySequence,
    "UnknownToken": UnknownToken,
    "StackUnderflow": StackUnderflow,
    "LeftoverOperands": LeftoverOperands,
    "FeatureOutOfRange": FeatureOutOfRange,
    "SequenceTooLong": SequenceTooLong,
    "CombinationTooLong": CombinationTooLong,
}


def raise_for(diag: Diagnostic) -> None:
    where = f" (combination {diag.combination + 1})" if diag.combination is not None else ""
    raise _ERRORS[diag.kind](diag.message + where)


def tokenize(text: str) -> list[str]:
    """Split surface text into raw token strings; whitespace is insignificant."""
    return [tok.strip() for tok in text.strip().split(",") if tok.strip()]


def parse_sequence(
    text: str,
    ops: OperatorSet = DEFAULT_OPERATORS,
    feature_count: int | None = None,
    max_combinations: int = MAX_COMBINATIONS,
    max_tokens: int = MAX_TOKENS,
) -> TransformationSequence:
    """Parse surface text into a validated sequence.

    Raises the first problem found as an :class:`~ft_evolve.errors.ExprError`
    subclass; a successful return always validates cleanly under the same
    limits.
    """
    raw = tokenize(text)
    if raw and raw[0] == SOS:
        raw = raw[1:]
    if raw and raw[-1] == EOS:
        raw = raw[:-1]

    groups: list[list[Token]] = [[]]
    for tok in raw:
        if tok == SEP:
            groups.append([])
            continue
        m = _FEATURE_RE.match(tok)
        if m:
            i = int(m.group(1))
            if i < 1 or (feature_count is not None and i > feature_count):
                raise FeatureOutOfRange(f"{tok} is outside the {feature_count} available features")
            groups[-1].append(Feature(i - 1))
            continue
        op = ops.lookup(tok)
        if op is None:
            raise UnknownToken(f"unknown token {tok!r}")
        groups[-1].append(Op(op.name))

    if len(groups) == 1 and not groups[0]:
        raise EmptySequence("no tokens to parse")
    seq = TransformationSequence(tuple(Combination(tuple(g)) for g in groups))
    diags = validate_structure(seq, ops, feature_count, max_combinations, max_tokens)
    if diags:
        raise_for(diags[0])
    return seq


def render_sequence(seq: TransformationSequence, style: str = "postfix", ops: OperatorSet = DEFAULT_OPERATORS) -> str:
    if style == "postfix":
        return f",{SEP},".join(comb.postfix() for comb in seq.combinations)
    if style == "infix":
        return "; ".join(comb.infix(ops) for comb in seq.combinations)
    raise ValueError(f"unknown style {style!r}")


def vocabulary_size(ops: OperatorSet, feature_count: int) -> int:
    """Token vocabulary: operators, one token per original feature, SOS/SEP/EOS."""
    if feature_count < 1:
        raise ValueError("feature_count must be >= 1")
    return len(ops) + feature_count + 3


def random_combination(
    rng: random.Random,
    ops: OperatorSet,
    feature_count: int,
    max_tokens: int = MAX_TOKENS,
    max_depth: int = 3,
) -> Combination:
    """Draw a random stack-valid combination that fits within ``max_tokens``.

    The root is always an operator when the budget allows it, since a bare
    feature would only duplicate an existing column.
    """

    def grow(depth: int, budget: int, root: bool = False) -> list[Token]:
        leaf = [Feature(rng.randrange(feature_count))]
        if depth == 0 or budget < 2 or (not root and rng.random() < 0.3):
            return leaf
        choices = [op for op in ops if op.arity == 1 or budget >= 3]
        if not choices:
            return leaf
        op = rng.choice(choices)
        if op.arity == 1:
            return grow(depth - 1, budget - 1) + [Op(op.name)]
        left = grow(depth - 1, (budget - 1) // 2)
        right = grow(depth - 1, budget - 1 - len(left))
        return left + right + [Op(op.name)]

    if len(ops) == 0:
        return Combination((Feature(rng.randrange(feature_count)),))
    return Combination(tuple(grow(max(max_depth, 1), max_tokens, root=True)))


def random_sequence(
    rng: random.Random,
    ops: OperatorSet,
    feature_count: int,
    max_combinations: int = MAX_COMBINATIONS,
    max_tokens: int = MAX_TOKENS,
) -> TransformationSequence:
    n = rng.randint(1, max_combinations)
    return TransformationSequence(
        tuple(random_combination(rng, ops, feature_count, max_tokens) for _ in range(n))
    )
