"""Generation policies: prompt construction, response parsing and backends.

A policy is anything with ``generate(prompt, settings, seed) -> str``. Two are
provided: :class:`MockPolicy`, a deterministic mutator of the best
demonstration, and :class:`HTTPPolicy`, a chat-completions client.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .errors import (
    AuthFailure,
    DisallowedOperator,
    EndpointUnreachable,
    ExprError,
    MalformedEndpointResponse,
    NoSequenceFound,
)
from .expr import (
    DEFAULT_OPERATORS,
    MAX_COMBINATIONS,
    MAX_TOKENS,
    Combination,
    Feature,
    Op,
    OperatorSet,
    TransformationSequence,
    parse_sequence,
    random_combination,
    render_sequence,
)
from .table import Dataset

BEGIN = "BEGIN_SEQUENCE"
END = "END_SEQUENCE"
API_KEY_ENV = "FT_EVOLVE_API_KEY"

GENERATE_INSTRUCTION = (
    "Study how the sequences above improve from step to step and write ONE new "
    "transformation sequence that should score higher than the last step."
)
ENHANCE_INSTRUCTION = (
    "The two sequences above are consecutive steps of an improvement chain. Write ONE "
    "intermediate or nearby variant that fills the gap between them."
)


@dataclass(frozen=True)
class GenerationRules:
    allowed_operators: OperatorSet = DEFAULT_OPERATORS
    feature_count: int = 1
    max_combinations: int = MAX_COMBINATIONS
    max_tokens_per_combination: int = MAX_TOKENS


@dataclass(frozen=True)
class SamplingSettings:
    temperature: float = 0.7
    top_p: float = 0.9
    top_k: int | None = 50
    max_new_tokens: int = 500


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    dataset_summary: str
    operator_block: str
    demonstration_block: str
    instruction_text: str
    # structured copies of what the text shows, for policies that work on data
    demonstrations: tuple[tuple[TransformationSequence, float], ...] = field(default=(), compare=False)
    rules: GenerationRules = field(default_factory=GenerationRules, compare=False)

    @property
    def user_text(self) -> str:
        return "\n\n".join(
            [self.dataset_summary, self.operator_block, self.demonstration_block, self.instruction_text]
        )

    @property
    def text(self) -> str:
        return self.system_text + "\n\n" + self.user_text

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system_text}, {"role": "user", "content": self.user_text}]


def build_prompt(traj, d: Dataset, rules: GenerationRules, instruction: str = GENERATE_INSTRUCTION) -> PromptBundle:
    """Render a trajectory and dataset into a deterministic few-shot prompt."""
    system = (
        f"You are a feature engineering assistant for a {d.task} task on the dataset "
        f"'{d.name}'. You write feature transformation sequences as postfix token lists "
        "that a program executes and scores with cross-validation."
    )
    feat_lines = ["Features (id: name, mean, std):"]
    for i, name in enumerate(d.feature_names):
        col = d.X[:, i]
        feat_lines.append(f"f{i + 1}: {name}, {col.mean():.4f}, {col.std():.4f}")
    op_lines = ["Operators (name/arity):"]
    op_lines.extend(f"{op.name}/{op.arity}" for op in rules.allowed_operators)
    symbols = ", ".join(f"{op.name} as {op.symbol}" for op in rules.allowed_operators if op.symbol)
    steps = list(getattr(traj, "steps", traj))
    demo_lines = ["Improvement chain (ascending score):"]
    for j, e in enumerate(steps, start=1):
        demo_lines.append(f"Step {j} — Sequence: {e.canonical}; Score: {e.value:.4f}")
    schema = (
        f"{instruction}\n"
        "Output format: tokens separated by commas; features are written f1, f2, ...; "
        "each feature combination is a postfix expression; separate combinations with <SEP>. "
        + (f"Write {symbols}. " if symbols else "")
        + f"Use at most {rules.max_combinations} combinations and at most "
        f"{rules.max_tokens_per_combination} tokens per combination. Reply with exactly one "
        f"sequence between the markers {BEGIN} and {END}, for example:\n"
        f"{BEGIN}\nf1,f2,/,<SEP>,f3,sqrt\n{END}"
    )
    return PromptBundle(
        system_text=system,
        dataset_summary="\n".join(feat_lines),
        operator_block="\n".join(op_lines),
        demonstration_block="\n".join(demo_lines),
        instruction_text=schema,
        demonstrations=tuple((e.sequence, e.value) for e in steps),
        rules=rules,
    )


_BLOCK_RE = re.compile(re.escape(BEGIN) + r"(.*?)" + re.escape(END), re.DOTALL)


def _enforce(seq: TransformationSequence, rules: GenerationRules) -> TransformationSequence:
    for comb in seq.combinations:
        for name in comb.operators():
            if name not in rules.allowed_operators:
                raise DisallowedOperator(f"operator {name!r} is not allowed")
    return seq


def _parse(text: str, rules: GenerationRules) -> TransformationSequence:
    # parse against the full vocabulary so a known-but-forbidden operator is
    # reported as DisallowedOperator rather than UnknownToken
    vocab = OperatorSet(list(DEFAULT_OPERATORS) + [
        op for op in rules.allowed_operators if op.name not in DEFAULT_OPERATORS.names
    ])
    seq = parse_sequence(
        " ".join(text.split()),
        vocab,
        rules.feature_count,
        rules.max_combinations,
        rules.max_tokens_per_combination,
    )
    return _enforce(seq, rules)


def parse_response(text: str, rules: GenerationRules) -> TransformationSequence:
    """Extract and validate the policy's sequence.

    The first marker block wins; without one, the first line that parses is
    used. Errors are tagged exceptions so callers can count invalid outputs.
    """
    m = _BLOCK_RE.search(text)
    if m:
        return _parse(m.group(1), rules)
    for line in text.splitlines():
        line = line.strip().strip("`")
        if "," not in line and not line.startswith("f"):
            continue
        try:
            return _parse(line, rules)
        except ExprError:
            continue
        except DisallowedOperator:
            raise
    raise NoSequenceFound("no parsable sequence in the response")


def wrap_sequence(seq: TransformationSequence) -> str:
    return f"{BEGIN}\n{render_sequence(seq)}\n{END}"


class Policy(Protocol):
    def generate(self, prompt: PromptBundle, settings: SamplingSettings, seed: int) -> str: ...


def generate(policy_impl: Policy, prompt: PromptBundle, settings: SamplingSettings, seed: int) -> str:
    return policy_impl.generate(prompt, settings, seed)


class MockPolicy:
    """Deterministic stand-in for a language model.

    Takes the best demonstration and applies one seeded mutation: swap an
    operator for another of the same arity, substitute a feature index, or
    append a combination. Half of the appends copy a combination from another
    demonstration (as a model reading its context would); the rest draw a
    fresh random one. Output always satisfies the prompt's rules.
    """

    name = "mock"

    def generate(self, prompt: PromptBundle, settings: SamplingSettings = SamplingSettings(), seed: int = 0) -> str:
        digest = hashlib.sha256(f"{seed}\x00{prompt.text}".encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        rules = prompt.rules
        if not prompt.demonstrations:
            return wrap_sequence(self._fresh(rng, rules))
        best = max(enumerate(prompt.demonstrations), key=lambda p: (p[1][1], p[0]))[1][0]
        if not self._obeys(best, rules):
            return wrap_sequence(self._fresh(rng, rules))
        donors = [
            c
            for seq, _ in prompt.demonstrations
            if seq is not best
            for c in seq.combinations
            if c.operators() and self._obeys(TransformationSequence((c,)), rules)
        ]
        return wrap_sequence(self._mutate(best, rng, rules, donors))

    @staticmethod
    def _obeys(seq: TransformationSequence, rules: GenerationRules) -> bool:
        if not 1 <= len(seq) <= rules.max_combinations:
            return False
        for comb in seq.combinations:
            if len(comb) > rules.max_tokens_per_combination:
                return False
            if any(n not in rules.allowed_operators for n in comb.operators()):
                return False
            if any(not 0 <= i < rules.feature_count for i in comb.features()):
                return False
        return True

    @staticmethod
    def _fresh(rng: random.Random, rules: GenerationRules) -> TransformationSequence:
        n = rng.randint(1, min(3, rules.max_combinations))
        return TransformationSequence(
            tuple(
                random_combination(rng, rules.allowed_operators, rules.feature_count,
                                   rules.max_tokens_per_combination, max_depth=2)
                for _ in range(n)
            )
        )

    def _mutate(
        self,
        seq: TransformationSequence,
        rng: random.Random,
        rules: GenerationRules,
        donors: Sequence[Combination] = (),
    ) -> TransformationSequence:
        ops = rules.allowed_operators
        combos = list(seq.combinations)
        sites_op = [
            (ci, ti)
            for ci, c in enumerate(combos)
            for ti, t in enumerate(c.tokens)
            if isinstance(t, Op) and len([o for o in ops if o.arity == ops.lookup(t.name).arity]) > 1
        ]
        sites_feat = [
            (ci, ti) for ci, c in enumerate(combos) for ti, t in enumerate(c.tokens) if isinstance(t, Feature)
        ]
        moves = []
        if sites_op:
            moves.append("swap")
        if sites_feat and rules.feature_count > 1:
            moves.append("substitute")
        if len(combos) < rules.max_combinations:
            moves.append("append")
        if not moves:
            return self._fresh(rng, rules)
        move = rng.choice(moves)
        if move == "append":
            donors = [c for c in donors if c not in combos]
            if donors and rng.random() < 0.5:
                combos.append(rng.choice(donors))
            else:
                combos.append(
                    random_combination(rng, ops, rules.feature_count, rules.max_tokens_per_combination, max_depth=2)
                )
            return TransformationSequence(tuple(combos))
        ci, ti = rng.choice(sites_op if move == "swap" else sites_feat)
        tokens = list(combos[ci].tokens)
        if move == "swap":
            arity = ops.lookup(tokens[ti].name).arity
            alternatives = [o.name for o in ops if o.arity == arity and o.name != tokens[ti].name]
            tokens[ti] = Op(rng.choice(alternatives))
        else:
            alternatives = [i for i in range(rules.feature_count) if i != tokens[ti].index]
            tokens[ti] = Feature(rng.choice(alternatives))
        combos[ci] = Combination(tuple(tokens))
        return TransformationSequence(tuple(combos))


class HTTPPolicy:
    """Client for a chat-completions-compatible endpoint.

    Retries 429 and 5xx responses (and connection failures) with exponential
    backoff. Every exchange can be appended to a JSONL audit file.
    """

    name = "http"
    RETRY_STATUS = {429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 1.0,
        send_top_k: bool = False,
        audit_path=None,
        max_in_flight: int = 4,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.send_top_k = send_top_k
        self.audit_path = audit_path
        self._audit_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))

    @property
    def url(self) -> str:
        if self.base_url.endswith("/chat/completions"):
            return self.base_url
        return self.base_url + "/chat/completions"

    def _audit(self, record: dict) -> None:
        if not self.audit_path:
            return
        with self._audit_lock, open(self.audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def generate(self, prompt: PromptBundle, settings: SamplingSettings = SamplingSettings(), seed: int = 0) -> str:
        with self._slots:
            return self._generate(prompt, settings)

    def _generate(self, prompt: PromptBundle, settings: SamplingSettings) -> str:
        body = {
            "model": self.model,
            "messages": prompt.messages(),
            "temperature": settings.temperature,
            "top_p": settings.top_p,
            "max_tokens": settings.max_new_tokens,
        }
        if self.send_top_k and settings.top_k is not None:
            body["top_k"] = settings.top_k
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = json.dumps(body).encode("utf-8")

        last_error: Exception | None = None
        for attempt in range(self.attempts):
            req = urllib.request.Request(self.url, data=payload, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    raw = resp.read().decode("utf-8")
                break
            except urllib.error.HTTPError as exc:
                self._audit({"request": body, "status": exc.code, "attempt": attempt})
                if exc.code in (401, 403):
                    raise AuthFailure(f"endpoint rejected credentials (HTTP {exc.code})") from None
                if exc.code not in self.RETRY_STATUS:
                    raise MalformedEndpointResponse(f"unexpected HTTP {exc.code} from endpoint") from None
                last_error = exc
            except (urllib.error.URLError, OSError) as exc:
                self._audit({"request": body, "error": str(exc), "attempt": attempt})
                last_error = exc
            if attempt + 1 < self.attempts:
                time.sleep(self.backoff * 2**attempt)
        else:
            if isinstance(last_error, urllib.error.HTTPError):
                raise EndpointUnreachable(f"endpoint kept failing (HTTP {last_error.code})")
            raise EndpointUnreachable(f"cannot reach {self.url}: {last_error}")

        try:
            content = json.loads(raw)["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            self._audit({"request": body, "response": raw})
            raise MalformedEndpointResponse("response lacks choices[0].message.content") from None
        if not isinstance(content, str):
            raise MalformedEndpointResponse("message content is not text")
        self._audit({"request": body, "response": json.loads(raw)})
        return content
