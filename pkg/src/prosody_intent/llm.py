"""Plan-selection prompts, LLM transports and plan-selection accuracy.

Each instruction ``<verb> the X <rel1> the Y <rel2> the Z`` has two candidate
plans. Plan 1 (reading A) picks X and places it ``rel1`` Y, where Y is
qualified by ``rel2`` Z. Plan 2 (reading B) picks X qualified by ``rel1`` Y and
places it ``rel2`` Z.
"""

from __future__ import annotations

import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .corpus import GOAL, LABEL_INDEX, LABELS, O, UtteranceSample
from .errors import ConfigurationError, LeakageError, ProtocolError, TransportError

log = logging.getLogger(__name__)

# Plan-selection accuracies reported for the human-speech study, for context only.
REFERENCE_ACCURACY = {"none (ASR only)": 0.50, "prosody BiLSTM": 0.5684, "prosody Transformer": 0.7196}


@dataclass(frozen=True)
class ReferentDescriptor:
    object: str
    qualifiers: tuple = ()  # ((relation, object), ...)

    def __post_init__(self):
        if len(self.qualifiers) > 2:
            raise ValueError("qualifier chain depth is at most 2")

    def render(self) -> str:
        return self.object + "".join(f" {{{rel}: {obj}}}" for rel, obj in self.qualifiers)


@dataclass(frozen=True)
class PlanStep:
    action: str  # "pick" | "place"
    target: ReferentDescriptor
    relation: str | None = None

    def render(self) -> str:
        if self.action == "place":
            return f"place({self.relation}, {self.target.render()})"
        return f"pick({self.target.render()})"


@dataclass(frozen=True)
class TaskPlanCandidate:
    plan_id: int
    steps: tuple
    reading: str  # the interpretation this plan realises, "A" or "B"

    def render(self) -> str:
        return "; ".join(s.render() for s in self.steps)

    @property
    def head_objects(self) -> list[str]:
        return [s.target.object for s in self.steps]


def candidate_plans(frame: dict, swap: bool = False) -> tuple[TaskPlanCandidate, TaskPlanCandidate]:
    x, y, z, r1, r2 = frame["x"], frame["y"], frame["z"], frame["rel1"], frame["rel2"]
    a = (PlanStep("pick", ReferentDescriptor(x)),
         PlanStep("place", ReferentDescriptor(y, ((r2, z),)), r1))
    b = (PlanStep("pick", ReferentDescriptor(x, ((r1, y),))),
         PlanStep("place", ReferentDescriptor(z), r2))
    order = [("B", b), ("A", a)] if swap else [("A", a), ("B", b)]
    return tuple(TaskPlanCandidate(i + 1, steps, reading) for i, (reading, steps) in enumerate(order))


@dataclass
class DisambiguationQuery:
    query_id: str
    instruction_id: int
    transcript: list
    intent_tags: list  # ints, one per word
    candidates: tuple
    gold_plan: int

    def __post_init__(self):
        if len(self.intent_tags) != len(self.transcript):
            raise ValueError(f"{self.query_id}: {len(self.intent_tags)} tags for {len(self.transcript)} words")
        if len(self.candidates) != 2:
            raise ValueError("a query needs exactly two candidate plans")


def make_query(sample: UtteranceSample, tags: Sequence[int] | None = None,
               swap: bool = False) -> DisambiguationQuery:
    """Query for ``sample``; ``tags`` defaults to the gold labels."""
    cands = candidate_plans(sample.frame, swap)
    gold = next(c.plan_id for c in cands if c.reading == sample.interpretation)
    tags = list(sample.labels) if tags is None else [int(t) for t in tags]
    return DisambiguationQuery(sample.id, sample.instruction_id, list(sample.tokens), tags, cands, gold)


# ---------------------------------------------------------------- prompt

_HEADER = (
    "A robot received a spoken instruction that can be read two ways. Each transcript word carries\n"
    "an intent tag: GOAL marks an object to act on or a destination, DETAIL marks an object that\n"
    "only qualifies another object, O marks any other word. Choose the task plan consistent with\n"
    "the tags. Plans are written pick(object) and place(relation, object), and {relation: object}\n"
    "attaches a qualifier. Reply in the format used by the examples."
)


def render_tags(words: Sequence[str], tags: Sequence[int]) -> str:
    return " ".join(f"{w}/{LABELS[t]}" for w, t in zip(words, tags))


def _block(q: DisambiguationQuery) -> list[str]:
    return [
        "TRANSCRIPT: " + " ".join(q.transcript),
        "TAGS: " + render_tags(q.transcript, q.intent_tags),
        *(f"PLAN {c.plan_id}: {c.render()}" for c in q.candidates),
    ]


def build_prompt(query: DisambiguationQuery, examples: Sequence[DisambiguationQuery]) -> str:
    if not examples:
        raise ValueError("build_prompt needs at least one in-context example")
    shared = {e.instruction_id for e in examples} & {query.instruction_id}
    if shared:
        raise LeakageError(f"in-context examples share instruction ids {sorted(shared)} with the query")
    lines = [_HEADER, ""]
    for i, ex in enumerate(examples, 1):
        lines += [f"### Example {i}", *_block(ex), f"ANSWER: PLAN {ex.gold_plan}", ""]
    lines += ["### Query", *_block(query), "Reply with exactly one final line: ANSWER: PLAN <1|2>"]
    return "\n".join(lines) + "\n"


_ANSWER = re.compile(r"PLAN\s*([12])\b", re.IGNORECASE)


def parse_choice(text: str) -> int | None:
    """Plan id from a response, or ``None`` when it cannot be resolved."""
    answer_lines = [ln for ln in text.splitlines() if ln.strip().upper().startswith("ANSWER:")]
    if answer_lines:
        m = _ANSWER.search(answer_lines[-1])
        if m:
            return int(m.group(1))
    digits = re.findall(r"(?<![\w.])([12])(?![\w.])", text)
    return int(digits[-1]) if digits else None


# ---------------------------------------------------------------- transports

_PLAN_LINE = re.compile(r"^PLAN ([12]): (.*)$")
_STEP = re.compile(r"(pick|place)\(([^()]*)\)")


def _parse_query_section(prompt: str):
    if "### Query" not in prompt:
        raise ProtocolError("prompt has no query section")
    section = prompt.split("### Query", 1)[1].splitlines()
    tags_line = next((ln for ln in section if ln.startswith("TAGS: ")), None)
    if tags_line is None:
        raise ProtocolError("query section has no TAGS line")
    pairs = []
    for item in tags_line[len("TAGS: "):].split():
        word, _, tag = item.rpartition("/")
        if not word or tag not in LABEL_INDEX:
            raise ProtocolError(f"malformed tagged word {item!r}")
        pairs.append((word, LABEL_INDEX[tag]))
    plans = {}
    for ln in section:
        m = _PLAN_LINE.match(ln)
        if m:
            heads = []
            for action, arg in _STEP.findall(m.group(2)):
                target = arg.split(",", 1)[1] if action == "place" else arg
                heads.append(target.split("{", 1)[0].strip())
            if not heads:
                raise ProtocolError(f"plan line without steps: {ln!r}")
            plans[int(m.group(1))] = heads
    if set(plans) != {1, 2}:
        raise ProtocolError("query section must list PLAN 1 and PLAN 2")
    return pairs, plans


def mock_llm(prompt: str) -> str:
    """Offline stand-in: prefer the plan whose pick/place objects cover more GOAL words.

    Among plans with equal coverage, the one with fewer head-object words left
    untagged wins; a remaining tie, or a query without any GOAL tag, gives PLAN 1.
    """
    pairs, plans = _parse_query_section(prompt)
    goal_words = [w for w, t in pairs if t == GOAL]
    if not goal_words:
        return "ANSWER: PLAN 1"

    def score(heads):
        head_tokens = [tok for obj in heads for tok in obj.split()]
        covered = sum(1 for w in goal_words if w in head_tokens)
        untagged = sum(1 for tok in head_tokens if tok not in goal_words)
        return covered, -untagged

    choice = 2 if score(plans[2]) > score(plans[1]) else 1
    return f"ANSWER: PLAN {choice}"


@dataclass
class LlmTransport:
    kind: str = "mock"  # "mock" | "http"
    endpoint: str | None = None
    model: str | None = None
    timeout_s: float = 30.0
    max_retries: int = 3
    max_concurrent: int = 4
    backoff_base_s: float = 1.0
    api_key_env: str = "LLM_API_KEY"
    system_prompt: str = "You are a careful planning assistant for a household robot."

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise ConfigurationError(f"unknown transport kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint and self.model):
            raise ConfigurationError("http transport needs endpoint and model")
        if self.max_retries < 0 or self.max_concurrent < 1:
            raise ConfigurationError("max_retries must be >= 0 and max_concurrent >= 1")


def _response_text(payload) -> str:
    try:
        if "choices" in payload:
            choice = payload["choices"][0]
            return choice["message"]["content"] if "message" in choice else choice["text"]
        return payload.get("content") or payload["text"]
    except (KeyError, IndexError, TypeError, AttributeError) as exc:
        raise ProtocolError(f"unrecognised response body: {payload!r:.200}") from exc


def http_llm(prompt: str, transport: LlmTransport, client=None,
             sleep: Callable[[float], None] = time.sleep) -> str:
    """POST a chat request; retries transport failures and 5xx with exponential backoff."""
    import httpx

    key = os.environ.get(transport.api_key_env)
    if not key:
        raise ConfigurationError(f"environment variable {transport.api_key_env} is not set")
    body = {
        "model": transport.model,
        "messages": [{"role": "system", "content": transport.system_prompt},
                     {"role": "user", "content": prompt}],
        "temperature": 0,
    }
    headers = {"Authorization": f"Bearer {key}"}
    own = client is None
    client = client or httpx.Client(timeout=transport.timeout_s)
    try:
        last = None
        for attempt in range(transport.max_retries + 1):
            if attempt:
                sleep(transport.backoff_base_s * 2 ** (attempt - 1))
            try:
                resp = client.post(transport.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return _response_text(resp.json())
            except ValueError as exc:
                raise ProtocolError(f"response is not JSON: {exc}") from exc
        raise TransportError(f"giving up after {transport.max_retries + 1} attempts ({last})")
    finally:
        if own:
            client.close()


def query_llm(prompts: Sequence[str], transport: LlmTransport, client=None) -> list[str]:
    """Responses in prompt order; http requests run up to ``max_concurrent`` at a time."""
    if transport.kind == "mock":
        return [mock_llm(p) for p in prompts]
    if not os.environ.get(transport.api_key_env):
        raise ConfigurationError(f"environment variable {transport.api_key_env} is not set")
    with ThreadPoolExecutor(max_workers=transport.max_concurrent) as pool:
        return list(pool.map(lambda p: http_llm(p, transport, client), prompts))


# ---------------------------------------------------------------- evaluation


def select_examples(pool: Sequence[UtteranceSample], k: int, exclude_instructions=(),
                    seed: int = 42) -> list[DisambiguationQuery]:
    """``k`` gold-tagged solved queries from ``pool``, alternating readings A and B."""
    import numpy as np

    excluded = set(exclude_instructions)
    ok = [s for s in pool if s.instruction_id not in excluded]
    by_reading = {r: [s for s in ok if s.interpretation == r] for r in ("A", "B")}
    rng = np.random.default_rng([seed, 40])
    for r in by_reading:
        by_reading[r] = [by_reading[r][i] for i in rng.permutation(len(by_reading[r]))]
    picked = []
    for i in range(k):
        bucket = by_reading["AB"[i % 2]] or by_reading["BA"[i % 2]]
        if not bucket:
            break
        picked.append(bucket.pop(0))
    if len(picked) < k:
        raise ValueError(f"only {len(picked)} usable in-context examples, {k} requested")
    return [make_query(s) for s in picked]


@dataclass
class PlanSelectionResult:
    accuracy: float
    rows: list
    invalid: int
    tagger: str
    reference: dict = field(default_factory=lambda: dict(REFERENCE_ACCURACY))

    def per_instruction(self) -> dict:
        out: dict = {}
        for r in self.rows:
            hit, n = out.get(r["instruction_id"], (0, 0))
            out[r["instruction_id"]] = (hit + int(r["correct"]), n + 1)
        return {k: hit / n for k, (hit, n) in sorted(out.items())}


def _tags_for(samples, tagger, predictions):
    if tagger == "gold":
        return [list(s.labels) for s in samples]
    if tagger == "none":
        return [[O] * len(s.labels) for s in samples]
    if tagger == "model":
        if predictions is None or len(predictions) != len(samples):
            raise ValueError("tagger='model' needs one prediction list per sample")
        return [list(p) for p in predictions]
    raise ValueError(f"unknown tagger {tagger!r}")


def predictions_from_checkpoint(samples: Sequence[UtteranceSample], checkpoint) -> list[list[int]]:
    from .models import load_checkpoint
    from .training import featurizer_from_checkpoint, predict_samples

    ckpt = load_checkpoint(checkpoint) if not hasattr(checkpoint, "params") else checkpoint
    return predict_samples(ckpt.build(), samples, featurizer_from_checkpoint(ckpt))


def eval_plan_selection(samples: Sequence[UtteranceSample], examples: Sequence[DisambiguationQuery],
                        tagger: str = "gold", transport: LlmTransport | None = None,
                        predictions: Sequence[Sequence[int]] | None = None,
                        client=None) -> PlanSelectionResult:
    """Plan-selection accuracy; unparseable responses count as wrong."""
    if not samples:
        raise ValueError("eval_plan_selection needs at least one sample")
    transport = transport or LlmTransport()
    tags = _tags_for(samples, tagger, predictions)
    queries = [make_query(s, t) for s, t in zip(samples, tags)]
    responses = query_llm([build_prompt(q, examples) for q in queries], transport, client)
    rows, invalid = [], 0
    for q, text in zip(queries, responses):
        choice = parse_choice(text)
        invalid += choice is None
        rows.append({"query_id": q.query_id, "instruction_id": q.instruction_id, "tagger": tagger,
                     "chosen": "invalid" if choice is None else choice, "gold": q.gold_plan,
                     "correct": int(choice == q.gold_plan)})
    acc = sum(r["correct"] for r in rows) / len(rows)
    return PlanSelectionResult(acc, rows, invalid, tagger)
