"""Predicate extraction and QA-pair production via pluggable backends.

Backends either replay stored gold data, tag predicates from a verb
lexicon (desk-scale testing only), call a chat-completion endpoint with
the QA-generation prompt, or call a remote parsing service.  Replies are
parsed into (question, answers) blocks, validated against the protocol
caps (at most 5 questions per predicate, 1 to 3 answers per question),
and near-duplicates are flagged rather than deleted.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

from .corpus import PredicateSpan, QAPair, ReferenceSummary
from .errors import BackendError, InputError, ParseError
from .llmclient import ChatCompletionClient, JsonServiceClient, load_prompt_template, render_template
from .textproc import tokenize_words

MAX_QUESTIONS_PER_PREDICATE = 5
MAX_ANSWERS_PER_QUESTION = 3
ALLOWED_SHOT_COUNTS = (0, 1, 3, 5)

WH_CLASSES = {"who": "WHO_WHAT", "whom": "WHO_WHAT", "what": "WHO_WHAT",
              "when": "WHEN", "where": "WHERE", "how": "HOW", "why": "WHY"}


# ---------------------------------------------------------------------------
# few-shot pools

@dataclass(frozen=True)
class QAGenShot:
    reference_id: str
    sentence: str
    verb: str
    qas: tuple[tuple[str, tuple[str, ...]], ...]


@dataclass(frozen=True)
class FewShotPool:
    examples: tuple

    @classmethod
    def load_qagen(cls, path: str | Path) -> "FewShotPool":
        shots = []
        path = Path(path)
        if not path.exists():
            raise InputError(f"no such file: {path}")
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    shots.append(QAGenShot(
                        reference_id=str(obj["reference_id"]),
                        sentence=str(obj["sentence"]),
                        verb=str(obj["verb"]),
                        qas=tuple((str(qa["question"]), tuple(str(a) for a in qa["answers"]))
                                  for qa in obj["qas"]),
                    ))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise InputError(f"{path}:{lineno}: malformed shot ({exc})") from exc
        return cls(tuple(shots))

    @classmethod
    def from_corpus(cls, references: Sequence[ReferenceSummary],
                    qas: Sequence[QAPair]) -> "FewShotPool":
        """One shot per predicate that has at least one QA."""
        refs = {r.example_id: r for r in references}
        grouped: dict[tuple, list[QAPair]] = {}
        for qa in qas:
            grouped.setdefault(qa.predicate_key(), []).append(qa)
        shots = []
        for key in sorted(grouped):
            example_id, sentence_index, _ = key
            ref = refs.get(example_id)
            if ref is None:
                raise InputError(f"QA cites unknown example {example_id!r}")
            group = grouped[key]
            shots.append(QAGenShot(
                reference_id=example_id,
                sentence=ref.sentence(sentence_index).text,
                verb=group[0].predicate.surface,
                qas=tuple((qa.question, qa.answers) for qa in group),
            ))
        return cls(tuple(shots))


def select_fewshot(pool: FewShotPool, target_reference_id: str, k: int, seed: int) -> list:
    """Uniform sample of k shots whose reference differs from the target."""
    if k == 0:
        return []
    eligible = [ex for ex in pool.examples if ex.reference_id != target_reference_id]
    if len(eligible) < k:
        raise InputError(f"few-shot pool has {len(eligible)} eligible examples "
                         f"(excluding reference {target_reference_id!r}), need {k}")
    return random.Random(seed).sample(eligible, k)


# ---------------------------------------------------------------------------
# output parsing and prompt rendering

_MARKER = re.compile(r"(question|answer)\s*:", re.IGNORECASE)


def parse_qa_output(raw: str) -> list[tuple[str, list[str]]]:
    """Extract Question:/Answer: blocks from a model reply.

    Labels are case-insensitive and may be surrounded by prose or blank
    lines; several Answer: segments under one Question accumulate, capped
    at three.  A reply with no Question block at all is a parse error.
    """
    matches = list(_MARKER.finditer(raw))
    blocks: list[tuple[str, list[str]]] = []
    current: tuple[str, list[str]] | None = None
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        text = raw[m.end():end].strip()
        if m.group(1).lower() == "question":
            if current is not None:
                blocks.append(current)
            current = (text, [])
        elif current is not None and len(current[1]) < MAX_ANSWERS_PER_QUESTION:
            current[1].append(text)
    if current is not None:
        blocks.append(current)
    if not blocks:
        raise ParseError("no Question/Answer blocks found in reply", raw=raw)
    return blocks


def render_shot_output(qas: Sequence[tuple[str, Sequence[str]]]) -> str:
    """Expected-output lines of one in-context example."""
    lines = []
    for question, answers in qas:
        parts = [f"Question: {question}"]
        parts += [f"Answer: {a}" for a in answers]
        lines.append(" ".join(parts))
    return "\n".join(lines)


def render_qa_generation_prompt(sentence: str, verb: str,
                                shots: Sequence[QAGenShot] = (),
                                prompt_dir: str | Path | None = None) -> str:
    template = load_prompt_template("qa_generation", prompt_dir)
    blocks = []
    for shot in shots:
        blocks.append(render_template(template, SENTENCE=shot.sentence, VERB=shot.verb)
                      + "\n" + render_shot_output(shot.qas))
    blocks.append(render_template(template, SENTENCE=sentence, VERB=verb))
    return "\n\n".join(blocks)


# ---------------------------------------------------------------------------
# backends

class QAGenBackend(Protocol):
    name: str
    kind: str
    deterministic: bool

    def extract_predicates(self, sentence: str) -> list[PredicateSpan]: ...

    def generate(self, sentence: str, predicate: PredicateSpan,
                 shots: Sequence[QAGenShot]) -> list[tuple[str, list[str]]]: ...


@dataclass
class GoldFileBackend:
    """Replays stored predicate spans and QA pairs, keyed by sentence text."""

    references: Sequence[ReferenceSummary]
    qas: Sequence[QAPair] = ()
    name: str = "gold"
    kind: str = "gold_file"
    deterministic: bool = True
    _spans: dict = field(init=False, repr=False)
    _qas: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._spans = {}
        self._qas = {}
        for ref in self.references:
            for sentence in ref.sentences:
                spans = [p for p in ref.predicates
                         if p.sentence_index == sentence.sentence_index]
                self._spans.setdefault(sentence.text, sorted(spans, key=lambda p: p.token_index))
        for qa in self.qas:
            self._qas.setdefault((qa.example_id, qa.sentence_index,
                                  qa.predicate.token_index), []).append(qa)
        self._qa_sentences = {}
        for ref in self.references:
            for sentence in ref.sentences:
                self._qa_sentences[sentence.text] = (ref.example_id, sentence.sentence_index)

    def extract_predicates(self, sentence: str) -> list[PredicateSpan]:
        if sentence not in self._spans:
            raise BackendError(f"gold backend has no stored sentence {sentence[:60]!r}")
        return list(self._spans[sentence])

    def generate(self, sentence: str, predicate: PredicateSpan,
                 shots: Sequence[QAGenShot] = ()) -> list[tuple[str, list[str]]]:
        located = self._qa_sentences.get(sentence)
        if located is None:
            raise BackendError(f"gold backend has no stored sentence {sentence[:60]!r}")
        example_id, sentence_index = located
        stored = self._qas.get((example_id, sentence_index, predicate.token_index), [])
        return [(qa.question, list(qa.answers)) for qa in stored]


@dataclass
class LexiconTaggerBackend:
    """Marks tokens found in a verb lexicon; test and fallback use only."""

    lexicon: frozenset[str]
    name: str = "lexicon"
    kind: str = "lexicon_tagger"
    deterministic: bool = True

    def extract_predicates(self, sentence: str) -> list[PredicateSpan]:
        spans = []
        for index, token in enumerate(tokenize_words(sentence)):
            if token.lower() in self.lexicon:
                spans.append(PredicateSpan(sentence_index=0, token_index=index,
                                           surface=token))
        return spans

    def generate(self, sentence: str, predicate: PredicateSpan,
                 shots: Sequence[QAGenShot] = ()) -> list[tuple[str, list[str]]]:
        raise BackendError("lexicon tagger extracts predicates only")


@dataclass
class RemoteLLMBackend:
    """Prompts a chat-completion endpoint; one retry on unparseable replies."""

    client: ChatCompletionClient
    name: str = "remote_llm"
    kind: str = "remote_llm"
    deterministic: bool = False
    prompt_dir: str | Path | None = None

    def extract_predicates(self, sentence: str) -> list[PredicateSpan]:
        raise BackendError("LLM backend generates QAs; predicates come from "
                           "gold spans or a parser service")

    def generate(self, sentence: str, predicate: PredicateSpan,
                 shots: Sequence[QAGenShot] = ()) -> list[tuple[str, list[str]]]:
        prompt = render_qa_generation_prompt(sentence, predicate.surface, shots,
                                             self.prompt_dir)
        reply = self.client.complete(prompt)
        try:
            return parse_qa_output(reply)
        except ParseError:
            reply = self.client.complete(prompt)
            return parse_qa_output(reply)


@dataclass
class RemoteParserBackend:
    """Calls a QA-SRL parsing service: POST {sentence, predicate_index}."""

    client: JsonServiceClient
    predicate_client: JsonServiceClient | None = None
    name: str = "remote_parser"
    kind: str = "remote_parser"
    deterministic: bool = True

    def extract_predicates(self, sentence: str) -> list[PredicateSpan]:
        if self.predicate_client is None:
            raise BackendError("parser backend has no predicate endpoint configured")
        reply = self.predicate_client.call({"sentence": sentence})
        try:
            spans = [PredicateSpan(sentence_index=0, token_index=int(p["token_index"]),
                                   surface=str(p["surface"])) for p in reply]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed predicate reply: {exc}", raw=repr(reply)) from exc
        return sorted(spans, key=lambda p: p.token_index)

    def generate(self, sentence: str, predicate: PredicateSpan,
                 shots: Sequence[QAGenShot] = ()) -> list[tuple[str, list[str]]]:
        reply = self.client.call({"sentence": sentence,
                                  "predicate_index": predicate.token_index})
        try:
            return [(str(qa["question"]), [str(a) for a in qa["answers"]]) for qa in reply]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed parser reply: {exc}", raw=repr(reply)) from exc


# ---------------------------------------------------------------------------
# operations

def extract_predicates(sentence: str, backend) -> list[PredicateSpan]:
    """Predicate spans of one sentence, sorted by token index.

    An empty result is the signal that the sentence lacks verbs and needs
    manual QA authoring.
    """
    if not sentence.strip():
        raise InputError("cannot extract predicates from an empty sentence")
    return sorted(backend.extract_predicates(sentence), key=lambda p: p.token_index)


def _qa_id(example_id: str, predicate: PredicateSpan, question: str,
           answers: Sequence[str]) -> str:
    material = json.dumps([example_id, predicate.sentence_index, predicate.token_index,
                           question, list(answers)], ensure_ascii=False)
    return "qa-" + hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


def generate_qas(sentence: str, predicate: PredicateSpan, backend, shots: int = 0,
                 pool: FewShotPool | None = None, example_id: str = "",
                 seed: int = 0) -> list[QAPair]:
    """Produce draft QA pairs for one predicate of one sentence.

    For shot counts above zero a few-shot pool must be supplied; in-context
    examples never come from the target reference.  An empty result is
    legal (the backend may decline to produce QAs).
    """
    if shots not in ALLOWED_SHOT_COUNTS:
        raise InputError(f"shots must be one of {ALLOWED_SHOT_COUNTS}, got {shots}")
    selected: list[QAGenShot] = []
    if shots > 0:
        if pool is None:
            raise InputError("few-shot generation requires a configured pool")
        selected = select_fewshot(pool, example_id, shots, seed)
    pairs = backend.generate(sentence, predicate, selected)
    drafts = []
    for question, answers in pairs:
        drafts.append(QAPair(
            qa_id=_qa_id(example_id, predicate, question, answers),
            example_id=example_id,
            sentence_index=predicate.sentence_index,
            predicate=predicate,
            question=question,
            answers=tuple(answers),
            status="draft",
        ))
    return drafts


@dataclass(frozen=True)
class QAVerdict:
    qa_id: str
    ok: bool
    reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValidationResult:
    batch_ok: bool
    batch_reasons: tuple[str, ...]
    verdicts: tuple[QAVerdict, ...]


def _is_contiguous_subsequence(needle: list[str], haystack: list[str]) -> bool:
    if not needle:
        return False
    for start in range(len(haystack) - len(needle) + 1):
        if haystack[start:start + len(needle)] == needle:
            return True
    return False


def validate_qa(qas: Sequence[QAPair], sentence: str, strict: bool = False) -> ValidationResult:
    """Check protocol caps for one predicate's QA batch.

    Batches over five questions are rejected whole.  Per QA, the answer
    count must be one to three; strict mode further requires a trailing
    question mark and answers that appear as contiguous token spans of the
    sentence (case-insensitive).  Returns verdicts, never raises.
    """
    predicates = {qa.predicate for qa in qas}
    if len(predicates) > 1:
        raise InputError("validate_qa expects QAs of a single predicate")
    batch_reasons = []
    if len(qas) > MAX_QUESTIONS_PER_PREDICATE:
        batch_reasons.append(f"{len(qas)} questions exceed the cap of "
                             f"{MAX_QUESTIONS_PER_PREDICATE} per predicate")
    sentence_tokens = [t.lower() for t in tokenize_words(sentence)]
    verdicts = []
    for qa in qas:
        reasons = []
        if not qa.question.strip():
            reasons.append("empty question")
        if len(qa.answers) == 0:
            reasons.append("no answers")
        elif len(qa.answers) > MAX_ANSWERS_PER_QUESTION:
            reasons.append(f"{len(qa.answers)} answers exceed the cap of "
                           f"{MAX_ANSWERS_PER_QUESTION}")
        if strict:
            if not qa.question.rstrip().endswith("?"):
                reasons.append("question does not end with '?'")
            for answer in qa.answers:
                answer_tokens = [t.lower() for t in tokenize_words(answer)]
                if not _is_contiguous_subsequence(answer_tokens, sentence_tokens):
                    reasons.append(f"answer {answer!r} is not a contiguous span "
                                   "of the sentence")
        if batch_reasons:
            reasons.append("batch rejected")
        verdicts.append(QAVerdict(qa.qa_id, ok=not reasons and not batch_reasons,
                                  reasons=tuple(reasons)))
    return ValidationResult(batch_ok=not batch_reasons,
                            batch_reasons=tuple(batch_reasons),
                            verdicts=tuple(verdicts))


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _normalize_tokens(text: str) -> list[str]:
    return [t for t in text.lower().translate(_PUNCT_TABLE).split() if t]


def dedup_key(qa: QAPair) -> tuple:
    """Normalized collision key: wh-word class plus sorted answer tokens."""
    question_tokens = _normalize_tokens(qa.question)
    leading = question_tokens[0] if question_tokens else ""
    wh_class = WH_CLASSES.get(leading, leading.upper() or "EMPTY")
    answer_tokens = sorted(t for a in qa.answers for t in _normalize_tokens(a))
    return (wh_class, tuple(answer_tokens))


def dedup_qas(qas: Sequence[QAPair]) -> list[bool]:
    """Flag later QAs whose normalized form collides with an earlier one.

    Returns one flag per input QA; flagged entries are duplicates to be
    surfaced during verification, never dropped here.
    """
    seen: set[tuple] = set()
    flags = []
    for qa in qas:
        key = dedup_key(qa)
        flags.append(key in seen)
        seen.add(key)
    return flags


def mark_duplicates(qas: Sequence[QAPair]) -> list[QAPair]:
    """Copy of the batch with colliding QAs re-statused as duplicates."""
    flags = dedup_qas(qas)
    return [replace(qa, status="duplicate") if flagged else qa
            for qa, flagged in zip(qas, flags)]
