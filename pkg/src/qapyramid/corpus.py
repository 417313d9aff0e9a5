"""Domain types and line-delimited file I/O for all protocol artifacts.

Records are stored one JSON object per line (UTF-8), with field names and
order exactly as in the dataclasses below.  Collections are immutable after
load and safe to share across threads.  Token indices are 0-based and all
ids are opaque strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError

QA_STATUSES = ("draft", "valid", "invalid", "duplicate")
PRESENCE_LABELS = ("present", "not_present")

DATASET_KINDS = ("references", "summaries", "qas", "judgments", "units")


def tokenize_for_validation(text: str) -> list[str]:
    # whitespace tokens; mirrors textproc.tokenize_words but kept local so
    # corpus has no intra-package dependencies
    return text.split()


@dataclass(frozen=True)
class Sentence:
    sentence_index: int
    text: str


@dataclass(frozen=True)
class PredicateSpan:
    """A predicate token (usually a verb) anchored in a reference sentence."""

    sentence_index: int
    token_index: int
    surface: str


@dataclass(frozen=True)
class ReferenceSummary:
    """A reference text with sentence segmentation and predicate spans.

    Sentence segmentation is provided in the input, never recomputed, so
    that predicate token indices stay meaningful.
    """

    example_id: str
    text: str
    sentences: tuple[Sentence, ...]
    predicates: tuple[PredicateSpan, ...]

    def sentence(self, index: int) -> Sentence:
        for s in self.sentences:
            if s.sentence_index == index:
                return s
        raise InputError(f"reference {self.example_id!r} has no sentence {index}")


@dataclass(frozen=True)
class SystemSummary:
    """One system's output for one example; empty text is legal and scores 0."""

    system_id: str
    example_id: str
    text: str


@dataclass(frozen=True)
class QAPair:
    """One predicate-argument question-answer unit of a reference summary."""

    qa_id: str
    example_id: str
    sentence_index: int
    predicate: PredicateSpan
    question: str
    answers: tuple[str, ...]
    status: str = "draft"

    def predicate_key(self) -> tuple[str, int, int]:
        return (self.example_id, self.sentence_index, self.predicate.token_index)


@dataclass(frozen=True)
class PresenceJudgment:
    """A binary present/not-present label for one (QA, system summary) pair."""

    qa_id: str
    system_id: str
    source_id: str
    label: str


@dataclass(frozen=True)
class UnitPresenceRecord:
    """Generic unit-presence row (ACU style), scored by ``scoring.unit_score``."""

    unit_id: str
    example_id: str
    unit_text: str
    system_id: str
    label: str


_RECORD_TYPES = {
    "references": ReferenceSummary,
    "summaries": SystemSummary,
    "qas": QAPair,
    "judgments": PresenceJudgment,
    "units": UnitPresenceRecord,
}


# ---------------------------------------------------------------------------
# per-record validation


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise InputError(message)


def validate_reference(ref: ReferenceSummary) -> None:
    _check(bool(ref.example_id), "reference with empty example_id")
    seen = set()
    for s in ref.sentences:
        _check(s.sentence_index not in seen,
               f"reference {ref.example_id!r}: duplicate sentence_index {s.sentence_index}")
        seen.add(s.sentence_index)
    joined = [t for s in ref.sentences for t in tokenize_for_validation(s.text)]
    _check(joined == tokenize_for_validation(ref.text),
           f"reference {ref.example_id!r}: sentence texts do not concatenate to the full text")
    for p in ref.predicates:
        _check(p.sentence_index in seen,
               f"reference {ref.example_id!r}: predicate points at missing sentence {p.sentence_index}")
        tokens = tokenize_for_validation(ref.sentence(p.sentence_index).text)
        _check(0 <= p.token_index < len(tokens),
               f"reference {ref.example_id!r}: predicate token_index {p.token_index} out of bounds")
        _check(tokens[p.token_index] == p.surface,
               f"reference {ref.example_id!r}: predicate surface {p.surface!r} does not match "
               f"token {tokens[p.token_index]!r} at index {p.token_index}")


def validate_summary(summary: SystemSummary) -> None:
    _check(bool(summary.system_id), "summary with empty system_id")
    _check(bool(summary.example_id), "summary with empty example_id")


def validate_qa(qa: QAPair, references: Sequence[ReferenceSummary] | None = None) -> None:
    _check(bool(qa.qa_id), "QA with empty qa_id")
    _check(bool(qa.question.strip()), f"QA {qa.qa_id!r}: empty question")
    _check(1 <= len(qa.answers) <= 3,
           f"QA {qa.qa_id!r}: expected 1..3 answers, got {len(qa.answers)}")
    _check(qa.sentence_index == qa.predicate.sentence_index,
           f"QA {qa.qa_id!r}: sentence_index disagrees with its predicate span")
    _check(qa.status in QA_STATUSES, f"QA {qa.qa_id!r}: unknown status {qa.status!r}")
    if references is not None:
        by_id = {r.example_id: r for r in references}
        _check(qa.example_id in by_id,
               f"QA {qa.qa_id!r}: dangling reference to example {qa.example_id!r}")
        ref = by_id[qa.example_id]
        tokens = tokenize_for_validation(ref.sentence(qa.sentence_index).text)
        _check(0 <= qa.predicate.token_index < len(tokens),
               f"QA {qa.qa_id!r}: predicate token_index out of bounds")
        _check(tokens[qa.predicate.token_index] == qa.predicate.surface,
               f"QA {qa.qa_id!r}: predicate surface {qa.predicate.surface!r} does not match sentence token")


def validate_judgment(j: PresenceJudgment,
                      qas: Sequence[QAPair] | None = None,
                      summaries: Sequence[SystemSummary] | None = None) -> None:
    _check(j.label in PRESENCE_LABELS, f"judgment with unknown label {j.label!r}")
    _check(bool(j.source_id), f"judgment for QA {j.qa_id!r} with empty source_id")
    if qas is not None:
        _check(any(q.qa_id == j.qa_id for q in qas),
               f"judgment cites unknown qa_id {j.qa_id!r}")
    if summaries is not None:
        _check(any(s.system_id == j.system_id for s in summaries),
               f"judgment cites unknown system_id {j.system_id!r}")


def validate_unit(u: UnitPresenceRecord) -> None:
    _check(bool(u.unit_id), "unit with empty unit_id")
    _check(u.label in PRESENCE_LABELS, f"unit {u.unit_id!r}: unknown label {u.label!r}")


# ---------------------------------------------------------------------------
# JSON (de)serialization

def _predicate_to_dict(p: PredicateSpan) -> dict:
    return {"sentence_index": p.sentence_index, "token_index": p.token_index,
            "surface": p.surface}


def record_to_dict(record) -> dict:
    if isinstance(record, ReferenceSummary):
        return {
            "example_id": record.example_id,
            "text": record.text,
            "sentences": [{"sentence_index": s.sentence_index, "text": s.text}
                          for s in record.sentences],
            "predicates": [_predicate_to_dict(p) for p in record.predicates],
        }
    if isinstance(record, SystemSummary):
        return {"system_id": record.system_id, "example_id": record.example_id,
                "text": record.text}
    if isinstance(record, QAPair):
        return {
            "qa_id": record.qa_id,
            "example_id": record.example_id,
            "sentence_index": record.sentence_index,
            "predicate": _predicate_to_dict(record.predicate),
            "question": record.question,
            "answers": list(record.answers),
            "status": record.status,
        }
    if isinstance(record, PresenceJudgment):
        return {"qa_id": record.qa_id, "system_id": record.system_id,
                "source_id": record.source_id, "label": record.label}
    if isinstance(record, UnitPresenceRecord):
        return {"unit_id": record.unit_id, "example_id": record.example_id,
                "unit_text": record.unit_text, "system_id": record.system_id,
                "label": record.label}
    raise InputError(f"unknown record type {type(record).__name__}")


def _predicate_from_dict(d: dict, where: str) -> PredicateSpan:
    try:
        return PredicateSpan(sentence_index=int(d["sentence_index"]),
                             token_index=int(d["token_index"]),
                             surface=str(d["surface"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{where}: malformed predicate span ({exc})") from exc


def record_from_dict(kind: str, d: dict, where: str):
    try:
        if kind == "references":
            return ReferenceSummary(
                example_id=str(d["example_id"]),
                text=str(d["text"]),
                sentences=tuple(Sentence(int(s["sentence_index"]), str(s["text"]))
                                for s in d["sentences"]),
                predicates=tuple(_predicate_from_dict(p, where) for p in d["predicates"]),
            )
        if kind == "summaries":
            return SystemSummary(system_id=str(d["system_id"]),
                                 example_id=str(d["example_id"]),
                                 text=str(d["text"]))
        if kind == "qas":
            return QAPair(
                qa_id=str(d["qa_id"]),
                example_id=str(d["example_id"]),
                sentence_index=int(d["sentence_index"]),
                predicate=_predicate_from_dict(d["predicate"], where),
                question=str(d["question"]),
                answers=tuple(str(a) for a in d["answers"]),
                status=str(d.get("status", "draft")),
            )
        if kind == "judgments":
            return PresenceJudgment(qa_id=str(d["qa_id"]), system_id=str(d["system_id"]),
                                    source_id=str(d["source_id"]), label=str(d["label"]))
        if kind == "units":
            return UnitPresenceRecord(unit_id=str(d["unit_id"]), example_id=str(d["example_id"]),
                                      unit_text=str(d["unit_text"]), system_id=str(d["system_id"]),
                                      label=str(d["label"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{where}: malformed {kind} record ({exc})") from exc
    raise InputError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# collection-level validation

def validate_collection(records: Sequence, kind: str,
                        references: Sequence[ReferenceSummary] | None = None,
                        summaries: Sequence[SystemSummary] | None = None,
                        qas: Sequence[QAPair] | None = None) -> None:
    """Check per-record invariants, id uniqueness, and referential integrity.

    Cross-references are only checked against the collections that are
    passed in; pass nothing to validate a collection in isolation.
    """
    if kind not in DATASET_KINDS:
        raise InputError(f"unknown dataset kind {kind!r}")
    expected = _RECORD_TYPES[kind]
    for r in records:
        if not isinstance(r, expected):
            raise InputError(f"{kind} collection contains a {type(r).__name__}")

    if kind == "references":
        seen: set = set()
        for r in records:
            validate_reference(r)
            _check(r.example_id not in seen, f"duplicate example_id {r.example_id!r}")
            seen.add(r.example_id)
    elif kind == "summaries":
        seen = set()
        for r in records:
            validate_summary(r)
            key = (r.system_id, r.example_id)
            _check(key not in seen, f"duplicate summary for {key!r}")
            seen.add(key)
            if references is not None:
                _check(any(ref.example_id == r.example_id for ref in references),
                       f"summary cites unknown example_id {r.example_id!r}")
    elif kind == "qas":
        seen = set()
        for r in records:
            validate_qa(r, references)
            _check(r.qa_id not in seen, f"duplicate qa_id {r.qa_id!r}")
            seen.add(r.qa_id)
    elif kind == "judgments":
        seen = set()
        for r in records:
            validate_judgment(r, qas, summaries)
            key = (r.qa_id, r.system_id, r.source_id)
            _check(key not in seen, f"duplicate judgment for {key!r}")
            seen.add(key)
    elif kind == "units":
        seen = set()
        texts: dict[str, tuple[str, str]] = {}
        for r in records:
            validate_unit(r)
            key = (r.unit_id, r.system_id)
            _check(key not in seen, f"duplicate unit judgment for {key!r}")
            seen.add(key)
            prior = texts.get(r.unit_id)
            if prior is not None:
                _check(prior == (r.example_id, r.unit_text),
                       f"unit_id {r.unit_id!r} reused with different content")
            texts[r.unit_id] = (r.example_id, r.unit_text)


# ---------------------------------------------------------------------------
# file I/O

def load_dataset(path: str | Path, kind: str,
                 references: Sequence[ReferenceSummary] | None = None,
                 summaries: Sequence[SystemSummary] | None = None,
                 qas: Sequence[QAPair] | None = None) -> list:
    """Load one record per line from ``path`` and validate the collection.

    Referential integrity is checked against whichever already-loaded
    collections are supplied.  Errors report the offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: malformed line ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise InputError(f"{path}:{lineno}: record is not an object")
            records.append(record_from_dict(kind, obj, f"{path}:{lineno}"))
    validate_collection(records, kind, references=references,
                        summaries=summaries, qas=qas)
    return records


def export_dataset(records: Iterable, kind: str, path: str | Path,
                   references: Sequence[ReferenceSummary] | None = None,
                   summaries: Sequence[SystemSummary] | None = None,
                   qas: Sequence[QAPair] | None = None) -> Path:
    """Write a validated collection as line-delimited JSON.

    Refuses to write anything if any record is invalid, so a partially
    written file never replaces good data.  Field order is byte-stable, so
    ``load_dataset(export_dataset(c)) == c``.
    """
    records = list(records)
    validate_collection(records, kind, references=references,
                        summaries=summaries, qas=qas)
    path = Path(path)
    lines = [json.dumps(record_to_dict(r), ensure_ascii=False) for r in records]
    try:
        with path.open("w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    return path


def convert_released_annotations(source: str | Path, destination: str | Path) -> None:
    """Convert an externally released annotation dump into the schemas above.

    The upstream release format is not standardized, so this converter is a
    stub: map the external fields onto ``references``/``qas``/``judgments``
    records (see docs/file-formats.md for the field-by-field contract) and
    write them with :func:`export_dataset`.
    """
    raise NotImplementedError(
        "no canonical upstream schema; adapt this stub to the dump you have")
