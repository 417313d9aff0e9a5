"""Summary scoring: raw and normalized scores, penalties, alpha calibration.

The raw score of a summary is the fraction of its reference's QA pairs
judged present.  Two penalties normalize it: a repetition penalty (one
minus the repetition rate) and a length penalty that exponentially
discounts summaries whose non-repetitive length exceeds the reference
length.  Raw scores are exact rationals internally and rendered to two
decimals (half up) for report parity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import metaeval, textproc
from .corpus import (PresenceJudgment, QAPair, ReferenceSummary, SystemSummary,
                     UnitPresenceRecord)
from .errors import InputError
from .presence import majority_vote

DEFAULT_ALPHA = 6.0  # calibrated de-correlation constant
DEFAULT_ALPHA_GRID = tuple(float(a) for a in range(1, 11))


def render_2dp(value) -> str:
    """Two-decimal display string, rounding half up (10/16 renders as 0.63)."""
    if isinstance(value, Fraction):
        dec = Decimal(value.numerator) / Decimal(value.denominator)
    else:
        dec = Decimal(repr(float(value)))
    return str(dec.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def qapyramid_score(presence_bits: Sequence[bool]) -> Fraction:
    """Number of present QA pairs over the total QA count."""
    if not presence_bits:
        raise InputError("cannot score a summary against zero QA pairs")
    return Fraction(sum(1 for b in presence_bits if b), len(presence_bits))


def unit_score(presence_bits: Sequence[bool]) -> Fraction:
    """Same recall over generic content units (ACU-style data)."""
    if not presence_bits:
        raise InputError("cannot score a summary against zero units")
    return Fraction(sum(1 for b in presence_bits if b), len(presence_bits))


def length_penalty(summary_tokens: float, reference_tokens: int,
                   repetition_penalty: float, alpha: float) -> float:
    """exp(min(0, (1 - effective_length/reference_length) / alpha)).

    The effective length is ``summary_tokens * repetition_penalty``; the
    penalty is 1 whenever it does not exceed the reference length.
    """
    if reference_tokens <= 0:
        raise InputError(f"reference_tokens must be positive, got {reference_tokens}")
    if alpha <= 0:
        raise InputError(f"alpha must be positive, got {alpha}")
    if not 0.0 <= repetition_penalty <= 1.0:
        raise InputError(f"repetition_penalty must be in [0, 1], got {repetition_penalty}")
    effective = summary_tokens * repetition_penalty
    return math.exp(min(0.0, (1.0 - effective / reference_tokens) / alpha))


def normalized_score(raw: float, repetition_penalty: float, length_pen: float) -> float:
    for name, v in (("raw", raw), ("repetition_penalty", repetition_penalty),
                    ("length_penalty", length_pen)):
        if not 0.0 <= float(v) <= 1.0:
            raise InputError(f"{name} must be in [0, 1], got {v}")
    return float(raw) * repetition_penalty * length_pen


@dataclass(frozen=True)
class AlphaCalibration:
    grid: tuple[float, ...]
    correlations: tuple[float, ...]
    chosen_alpha: float


def calibrate_alpha(records: Sequence[tuple[float, float, int]],
                    grid: Sequence[float] = DEFAULT_ALPHA_GRID) -> AlphaCalibration:
    """Choose alpha that best de-correlates penalized score from length.

    ``records`` holds (raw_score, effective_length, reference_length)
    triples.  For every alpha in the grid the Pearson correlation between
    effective length and penalized score is computed; the alpha with the
    smallest absolute correlation wins, ties going to the smaller alpha.
    """
    if len(records) < 3:
        raise InputError(f"alpha calibration needs at least 3 records, got {len(records)}")
    if not grid:
        raise InputError("alpha grid is empty")
    lengths = [float(eff) for _, eff, _ in records]
    correlations = []
    for alpha in grid:
        penalized = [length_penalty(eff, ref, 1.0, alpha) * float(raw)
                     for raw, eff, ref in records]
        correlations.append(metaeval.pearson(lengths, penalized))
    chosen = min(zip(grid, correlations), key=lambda ac: (abs(ac[1]), ac[0]))[0]
    return AlphaCalibration(tuple(float(a) for a in grid), tuple(correlations),
                            float(chosen))


def partial_presence_rate(groups: Iterable[Sequence[bool]]) -> Fraction:
    """Fraction of predicate groups with both present and absent QA pairs."""
    total = 0
    mixed = 0
    for group in groups:
        bits = list(group)
        if not bits:
            raise InputError("empty predicate group")
        total += 1
        if any(bits) and not all(bits):
            mixed += 1
    if total == 0:
        raise InputError("no predicate groups given")
    return Fraction(mixed, total)


def group_presence_by_predicate(qas: Sequence[QAPair],
                                labels: Mapping[tuple[str, str], str]) -> list[list[bool]]:
    """Group final labels by (system, predicate) for the partial-presence statistic."""
    groups: dict[tuple, list[bool]] = {}
    for (qa_id, system_id), label in sorted(labels.items()):
        qa = next((q for q in qas if q.qa_id == qa_id), None)
        if qa is None:
            raise InputError(f"label cites unknown qa_id {qa_id!r}")
        key = (system_id,) + qa.predicate_key()
        groups.setdefault(key, []).append(label == "present")
    return [groups[k] for k in sorted(groups)]


@dataclass(frozen=True)
class ScoreRecord:
    system_id: str
    example_id: str
    qa_total: int
    qa_present: int
    raw_score: Fraction
    repetition_rate: float
    repetition_penalty: float
    effective_length: float
    length_penalty: float
    normalized_score: float
    reference_length: int
    summary_length: int

    def to_dict(self) -> dict:
        return {
            "system_id": self.system_id,
            "example_id": self.example_id,
            "qa_total": self.qa_total,
            "qa_present": self.qa_present,
            "raw_score": float(self.raw_score),
            "repetition_rate": self.repetition_rate,
            "repetition_penalty": self.repetition_penalty,
            "effective_length": self.effective_length,
            "length_penalty": self.length_penalty,
            "normalized_score": self.normalized_score,
            "reference_length": self.reference_length,
            "summary_length": self.summary_length,
        }


def collapse_judgments(judgments: Sequence[PresenceJudgment]) -> dict[tuple[str, str], str]:
    """One final label per (qa_id, system_id).

    A single source passes through; an odd number of sources is resolved by
    majority vote, mirroring the three-annotator protocol.
    """
    by_pair: dict[tuple[str, str], list[str]] = {}
    for j in judgments:
        by_pair.setdefault((j.qa_id, j.system_id), []).append(j.label)
    return {pair: labels[0] if len(labels) == 1 else majority_vote(labels)
            for pair, labels in by_pair.items()}


def scorable_qas(qas: Sequence[QAPair]) -> list[QAPair]:
    """QAs that count toward the total: drafts and verified-valid ones."""
    return [q for q in qas if q.status in ("draft", "valid")]


def score_run(references: Sequence[ReferenceSummary],
              summaries: Sequence[SystemSummary],
              qas: Sequence[QAPair],
              judgments: Sequence[PresenceJudgment],
              alpha: float = DEFAULT_ALPHA,
              normalize: bool = True,
              min_span: int = 1,
              count_first_occurrence: bool = True) -> tuple[list[ScoreRecord], dict[str, dict]]:
    """Score every (system, example) pair and aggregate per-system means.

    Every summary must have a judgment for each scorable QA of its example;
    missing pairs abort with a list of (qa_id, system_id).  Invalid and
    duplicate-flagged QAs do not count toward the QA total.
    """
    refs_by_id = {r.example_id: r for r in references}
    kept = scorable_qas(qas)
    qas_by_example: dict[str, list[QAPair]] = {}
    for qa in kept:
        qas_by_example.setdefault(qa.example_id, []).append(qa)
    labels = collapse_judgments(judgments)

    missing = []
    for summary in summaries:
        for qa in qas_by_example.get(summary.example_id, []):
            if (qa.qa_id, summary.system_id) not in labels:
                missing.append((qa.qa_id, summary.system_id))
    if missing:
        raise InputError(f"missing judgments for {len(missing)} (qa_id, system_id) "
                         f"pairs, e.g. {missing[:5]}")

    records = []
    for summary in sorted(summaries, key=lambda s: (s.system_id, s.example_id)):
        ref = refs_by_id.get(summary.example_id)
        if ref is None:
            raise InputError(f"summary cites unknown example_id {summary.example_id!r}")
        example_qas = qas_by_example.get(summary.example_id)
        if not example_qas:
            raise InputError(f"no scorable QA pairs for example {summary.example_id!r}")
        bits = [labels[(qa.qa_id, summary.system_id)] == "present" for qa in example_qas]
        raw = qapyramid_score(bits)

        summary_tokens = textproc.tokenize_words(summary.text)
        report = textproc.detect_repetition(
            summary_tokens, min_span=min_span,
            count_first_occurrence=count_first_occurrence)
        p_r = 1.0 - report.repetition_rate
        effective = textproc.effective_length(len(summary_tokens), report.repetition_rate)
        ref_len = len(textproc.tokenize_words(ref.text))
        p_l = length_penalty(len(summary_tokens), ref_len, p_r, alpha)
        records.append(ScoreRecord(
            system_id=summary.system_id,
            example_id=summary.example_id,
            qa_total=len(bits),
            qa_present=sum(bits),
            raw_score=raw,
            repetition_rate=report.repetition_rate,
            repetition_penalty=p_r,
            effective_length=effective,
            length_penalty=p_l,
            normalized_score=normalized_score(float(raw), p_r, p_l),
            reference_length=ref_len,
            summary_length=len(summary_tokens),
        ))

    means: dict[str, dict] = {}
    by_system: dict[str, list[ScoreRecord]] = {}
    for record in records:
        by_system.setdefault(record.system_id, []).append(record)
    for system_id in sorted(by_system):
        group = by_system[system_id]
        entry = {
            "qapyramid": sum((r.raw_score for r in group), Fraction(0)) / len(group),
            "length": math.fsum(r.summary_length for r in group) / len(group),
            "examples": len(group),
        }
        if normalize:
            entry["nqapyramid"] = math.fsum(r.normalized_score for r in group) / len(group)
        means[system_id] = entry
    return records, means


def render_system_table(means: Mapping[str, Mapping], normalize: bool = True) -> str:
    """Tab-separated per-system table with two-decimal scores."""
    header = ["system", "QAPyramid"]
    if normalize:
        header.append("nQAPyramid")
    header.append("length")
    lines = ["\t".join(header)]
    for system_id in sorted(means):
        entry = means[system_id]
        row = [system_id, render_2dp(entry["qapyramid"])]
        if normalize:
            row.append(render_2dp(entry["nqapyramid"]))
        row.append(render_2dp(entry["length"]))
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def write_score_records(records: Sequence[ScoreRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
    return path


def load_calibration_records(path: str | Path) -> list[tuple[float, float, int]]:
    """Read (raw_score, effective_length, reference_length) from a record file."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    triples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                triples.append((float(obj["raw_score"]), float(obj["effective_length"]),
                                int(obj["reference_length"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return triples


def score_units(units: Sequence[UnitPresenceRecord]) -> dict[tuple[str, str], Fraction]:
    """ACU-style recall per (system, example) from generic unit judgments."""
    groups: dict[tuple[str, str], list[bool]] = {}
    for u in units:
        groups.setdefault((u.system_id, u.example_id), []).append(u.label == "present")
    return {key: unit_score(bits) for key, bits in sorted(groups.items())}
