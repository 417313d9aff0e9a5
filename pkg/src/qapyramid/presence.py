"""Present / not-present judging for (QA pair, system summary) pairs.

Backends: replayed human majority labels, a deterministic lexical floor
baseline, and chat-completion prompting either on the QA directly or on a
statement derived from it.  Batch judging caches every verdict on disk so
reruns are free.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .corpus import QAPair, PresenceJudgment, SystemSummary
from .errors import BackendError, InputError, ParseError
from .llmclient import ChatCompletionClient, load_prompt_template, render_template, run_bounded
from .qagen import ALLOWED_SHOT_COUNTS
from .textproc import tokenize_words

PRESENT = "present"
NOT_PRESENT = "not_present"

# small closed-class list; the lexical baseline only needs rough content filtering
STOPWORDS = frozenset("""
a an the this that these those it its his her their our your my
is are was were be been being am
and or but nor so yet for of to in on at by with from as into onto over under
do does did done have has had will would can could shall should may might must
not no 's 't s t
""".split())


def parse_yesno(raw: str) -> str:
    """Map a reply onto a label via the first [YES]/[NO] occurrence.

    Falls back to a bare leading yes/no token when no bracketed marker is
    present; anything else is a parse error carrying the raw reply.
    """
    lowered = raw.lower()
    yes_pos = lowered.find("[yes]")
    no_pos = lowered.find("[no]")
    if yes_pos >= 0 and (no_pos < 0 or yes_pos < no_pos):
        return PRESENT
    if no_pos >= 0:
        return NOT_PRESENT
    head = lowered.strip().split()
    if head:
        token = head[0].strip(".,!:;")
        if token == "yes":
            return PRESENT
        if token == "no":
            return NOT_PRESENT
    raise ParseError("reply contains neither [YES] nor [NO]", raw=raw)


def majority_vote(labels: Sequence[str]) -> str:
    """Strict majority of an odd number of labels."""
    if len(labels) == 0 or len(labels) % 2 == 0:
        raise InputError(f"majority vote needs an odd label count, got {len(labels)}")
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    return max(counts.items(), key=lambda kv: kv[1])[0]


def qa_to_statement(qa: QAPair, client: ChatCompletionClient,
                    prompt_dir: str | Path | None = None) -> str:
    """Turn a QA pair into a declarative statement via the conversion prompt."""
    template = load_prompt_template("qa_to_statement", prompt_dir)
    prompt = render_template(template, QUESTION=qa.question,
                             ANSWER=format_answer(qa.answers))
    reply = client.complete(prompt)
    stripped = reply.lstrip()
    if not stripped.lower().startswith("statement:"):
        raise ParseError("reply lacks the required 'Statement:' prefix", raw=reply)
    return stripped[len("statement:"):].strip()


def format_answer(answers: Sequence[str]) -> str:
    """Fill the single {ANSWER} slot; answer variants are '; '-joined."""
    return "; ".join(answers)


# ---------------------------------------------------------------------------
# few-shot pool for presence prompting

@dataclass(frozen=True)
class PresenceShot:
    reference_id: str
    summary: str
    question: str
    answer: str
    label: str


def load_presence_pool(path: str | Path) -> list[PresenceShot]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    shots = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                shots.append(PresenceShot(
                    reference_id=str(obj["reference_id"]),
                    summary=str(obj["summary"]),
                    question=str(obj["question"]),
                    answer=str(obj["answer"]),
                    label=str(obj["label"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed shot ({exc})") from exc
    return shots


def select_presence_shots(pool: Sequence[PresenceShot], target_reference_id: str,
                          k: int, seed: int) -> list[PresenceShot]:
    if k == 0:
        return []
    eligible = [s for s in pool if s.reference_id != target_reference_id]
    if len(eligible) < k:
        raise InputError(f"presence pool has {len(eligible)} eligible examples "
                         f"(excluding reference {target_reference_id!r}), need {k}")
    return random.Random(seed).sample(eligible, k)


# ---------------------------------------------------------------------------
# backends

class PresenceBackend(Protocol):
    name: str
    kind: str
    deterministic: bool

    def judge(self, summary: SystemSummary, qa: QAPair,
              shots: Sequence[PresenceShot]) -> tuple[str, str]:
        """Return (label, raw reply)."""

    def cache_material(self, summary: SystemSummary, qa: QAPair,
                       shots: Sequence[PresenceShot]) -> str: ...


@dataclass
class HumanMajorityBackend:
    """Replays stored per-annotator labels, aggregated by majority vote."""

    judgments: Sequence[PresenceJudgment]
    name: str = "human_majority"
    kind: str = "human_majority"
    deterministic: bool = True
    _by_pair: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._by_pair = {}
        for j in self.judgments:
            self._by_pair.setdefault((j.qa_id, j.system_id), []).append(j.label)

    def judge(self, summary: SystemSummary, qa: QAPair,
              shots: Sequence[PresenceShot] = ()) -> tuple[str, str]:
        labels = self._by_pair.get((qa.qa_id, summary.system_id))
        if not labels:
            raise BackendError(f"no stored labels for ({qa.qa_id!r}, {summary.system_id!r})")
        return majority_vote(labels), json.dumps(labels)

    def cache_material(self, summary: SystemSummary, qa: QAPair,
                       shots: Sequence[PresenceShot] = ()) -> str:
        return json.dumps(sorted(self._by_pair.get((qa.qa_id, summary.system_id), [])))


_SUFFIXES = ("ing", "ed", "es", "s")


def _stem(word: str) -> str:
    for suffix in _SUFFIXES:
        if word.endswith(suffix) and len(word) - len(suffix) >= 3:
            return word[:-len(suffix)]
    return word


@dataclass
class LexicalBaselineBackend:
    """Token-containment floor baseline; deliberately not semantic.

    Present when every answer's content tokens all occur in the summary and
    the predicate surface (or its suffix-stripped stem) occurs too.
    """

    name: str = "lexical"
    kind: str = "lexical_baseline"
    deterministic: bool = True

    def judge(self, summary: SystemSummary, qa: QAPair,
              shots: Sequence[PresenceShot] = ()) -> tuple[str, str]:
        summary_tokens = {t.lower() for t in tokenize_words(summary.text)}
        summary_stems = {_stem(t) for t in summary_tokens}
        for answer in qa.answers:
            content = {t.lower() for t in tokenize_words(answer)} - STOPWORDS
            if not content <= summary_tokens:
                return NOT_PRESENT, "answer tokens missing"
        surface = qa.predicate.surface.lower()
        if surface not in summary_tokens and _stem(surface) not in summary_stems:
            return NOT_PRESENT, "predicate missing"
        return PRESENT, "all tokens found"

    def cache_material(self, summary: SystemSummary, qa: QAPair,
                       shots: Sequence[PresenceShot] = ()) -> str:
        return json.dumps([summary.text, qa.question, list(qa.answers),
                           qa.predicate.surface])


def render_presence_prompt(summary_text: str, question: str, answer: str,
                           shots: Sequence[PresenceShot] = (),
                           prompt_dir: str | Path | None = None,
                           reference_text: str | None = None) -> str:
    name = "qa_presence_with_reference" if reference_text is not None else "qa_presence"
    template = load_prompt_template(name, prompt_dir)
    blocks = []
    for shot in shots:
        rendered = render_template(template, SUMMARY=shot.summary,
                                   QUESTION=shot.question, ANSWER=shot.answer,
                                   REFERENCE="")
        marker = "[YES]" if shot.label == PRESENT else "[NO]"
        blocks.append(rendered + "\n" + marker)
    substitutions = {"SUMMARY": summary_text, "QUESTION": question, "ANSWER": answer}
    if reference_text is not None:
        substitutions["REFERENCE"] = reference_text
    blocks.append(render_template(template, **substitutions))
    return "\n\n".join(blocks)


def render_statement_prompt(summary_text: str, statement: str,
                            shots: Sequence[PresenceShot] = (),
                            prompt_dir: str | Path | None = None) -> str:
    template = load_prompt_template("statement_presence", prompt_dir)
    blocks = []
    for shot in shots:
        # shot answers double as statements when a statement pool is not given
        rendered = render_template(template, SUMMARY=shot.summary,
                                   STATEMENT=shot.answer)
        marker = "[YES]" if shot.label == PRESENT else "[NO]"
        blocks.append(rendered + "\n" + marker)
    blocks.append(render_template(template, SUMMARY=summary_text, STATEMENT=statement))
    return "\n\n".join(blocks)


@dataclass
class RemoteLLMPresenceBackend:
    """Prompts on the QA pair directly; the reference is omitted by default.

    Set ``reference_texts`` (example_id to reference text) to re-enable the
    reference block for experiments.
    """

    client: ChatCompletionClient
    name: str = "remote_llm"
    kind: str = "remote_llm"
    deterministic: bool = False
    prompt_dir: str | Path | None = None
    reference_texts: dict | None = None

    def _prompt(self, summary: SystemSummary, qa: QAPair,
                shots: Sequence[PresenceShot]) -> str:
        reference = None
        if self.reference_texts is not None:
            reference = self.reference_texts.get(qa.example_id, "")
        return render_presence_prompt(summary.text, qa.question,
                                      format_answer(qa.answers), shots,
                                      self.prompt_dir, reference)

    def judge(self, summary: SystemSummary, qa: QAPair,
              shots: Sequence[PresenceShot] = ()) -> tuple[str, str]:
        prompt = self._prompt(summary, qa, shots)
        reply = self.client.complete(prompt)
        try:
            return parse_yesno(reply), reply
        except ParseError:
            reply = self.client.complete(prompt)
            return parse_yesno(reply), reply

    def cache_material(self, summary: SystemSummary, qa: QAPair,
                       shots: Sequence[PresenceShot] = ()) -> str:
        return self._prompt(summary, qa, shots)


@dataclass
class RemoteLLMStatementBackend:
    """Converts the QA into a statement first, then asks about the statement."""

    client: ChatCompletionClient
    name: str = "remote_llm_statement"
    kind: str = "remote_llm_statement"
    deterministic: bool = False
    prompt_dir: str | Path | None = None

    def judge(self, summary: SystemSummary, qa: QAPair,
              shots: Sequence[PresenceShot] = ()) -> tuple[str, str]:
        statement = qa_to_statement(qa, self.client, self.prompt_dir)
        prompt = render_statement_prompt(summary.text, statement, shots, self.prompt_dir)
        reply = self.client.complete(prompt)
        try:
            return parse_yesno(reply), reply
        except ParseError:
            reply = self.client.complete(prompt)
            return parse_yesno(reply), reply

    def cache_material(self, summary: SystemSummary, qa: QAPair,
                       shots: Sequence[PresenceShot] = ()) -> str:
        # statement conversion happens per call; key on the conversion inputs
        template = load_prompt_template("qa_to_statement", self.prompt_dir)
        conversion = render_template(template, QUESTION=qa.question,
                                     ANSWER=format_answer(qa.answers))
        return conversion + "\n---\n" + render_statement_prompt(
            summary.text, "{STATEMENT}", shots, self.prompt_dir)


# ---------------------------------------------------------------------------
# judging

def judge_presence(summary: SystemSummary, qa: QAPair, backend, shots: int = 0,
                   pool: Sequence[PresenceShot] = (), seed: int = 0) -> str:
    """One present/not-present label for a (summary, QA) pair."""
    if shots not in ALLOWED_SHOT_COUNTS:
        raise InputError(f"shots must be one of {ALLOWED_SHOT_COUNTS}, got {shots}")
    selected: list[PresenceShot] = []
    if shots > 0:
        selected = select_presence_shots(pool, qa.example_id, shots, seed)
    label, _ = backend.judge(summary, qa, selected)
    return label


@dataclass
class BatchResult:
    judgments: list[PresenceJudgment]
    failures: list[dict]
    cache_hits: int = 0
    calls: int = 0


class JudgmentCache:
    """One file per key under the cache directory, write-once semantics.

    The key hashes the backend name, the rendered prompt material, and the
    (qa_id, system_id) pair, so editing a template invalidates old entries.
    """

    def __init__(self, cache_dir: str | Path):
        self.root = Path(cache_dir)

    def _path(self, backend_name: str, material: str, qa_id: str, system_id: str) -> Path:
        digest = hashlib.sha256(
            "\x1f".join([backend_name, material, qa_id, system_id]).encode("utf-8")
        ).hexdigest()
        safe_name = re.sub(r"[^A-Za-z0-9_.-]", "_", backend_name) or "backend"
        return self.root / safe_name / f"{digest}.json"

    def get(self, backend_name: str, material: str, qa_id: str, system_id: str) -> dict | None:
        path = self._path(backend_name, material, qa_id, system_id)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None

    def put(self, backend_name: str, material: str, qa_id: str, system_id: str,
            label: str, raw: str) -> None:
        path = self._path(backend_name, material, qa_id, system_id)
        if path.exists():  # write-once per key
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps({"label": label, "raw": raw, "timestamp": time.time(),
                              "qa_id": qa_id, "system_id": system_id},
                             ensure_ascii=False)
        tmp = path.with_suffix(f".tmp-{id(payload)}")
        tmp.write_text(payload, encoding="utf-8")
        tmp.replace(path)


def batch_judge(summaries: Sequence[SystemSummary], qas: Sequence[QAPair], backend,
                shots: int = 0, pool: Sequence[PresenceShot] = (), seed: int = 0,
                cache_dir: str | Path | None = None,
                max_in_flight: int = 4) -> BatchResult:
    """Judge every (QA, summary) pair sharing an example id.

    Results are cached on disk when a cache directory is given; warm reruns
    issue no backend calls.  Per-pair failures are collected in a sidecar
    list instead of aborting the batch.
    """
    if shots not in ALLOWED_SHOT_COUNTS:
        raise InputError(f"shots must be one of {ALLOWED_SHOT_COUNTS}, got {shots}")
    cache = JudgmentCache(cache_dir) if cache_dir else None
    work: list[tuple[SystemSummary, QAPair, list[PresenceShot]]] = []
    for summary in summaries:
        for qa in qas:
            if qa.example_id != summary.example_id:
                continue
            selected: list[PresenceShot] = []
            if shots > 0:
                selected = select_presence_shots(pool, qa.example_id, shots, seed)
            work.append((summary, qa, selected))

    result = BatchResult(judgments=[], failures=[])
    pending = []
    for item in work:
        summary, qa, selected = item
        if cache is not None:
            material = backend.cache_material(summary, qa, selected)
            hit = cache.get(backend.name, material, qa.qa_id, summary.system_id)
            if hit is not None:
                result.cache_hits += 1
                result.judgments.append(PresenceJudgment(
                    qa_id=qa.qa_id, system_id=summary.system_id,
                    source_id=backend.name, label=hit["label"]))
                continue
        pending.append(item)

    def _judge(item):
        summary, qa, selected = item
        return backend.judge(summary, qa, selected)

    for item, value, error in run_bounded(_judge, pending, max_in_flight):
        summary, qa, selected = item
        result.calls += 1
        if error is not None:
            result.failures.append({"qa_id": qa.qa_id, "system_id": summary.system_id,
                                    "error": str(error)})
            continue
        label, raw = value
        if cache is not None:
            material = backend.cache_material(summary, qa, selected)
            cache.put(backend.name, material, qa.qa_id, summary.system_id, label, raw)
        result.judgments.append(PresenceJudgment(
            qa_id=qa.qa_id, system_id=summary.system_id,
            source_id=backend.name, label=label))

    result.judgments.sort(key=lambda j: (j.system_id, j.qa_id))
    result.failures.sort(key=lambda f: (f["system_id"], f["qa_id"]))
    return result
