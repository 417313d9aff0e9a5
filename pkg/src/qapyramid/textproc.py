"""Tokenization, consecutive-repetition detection, and effective length.

Degenerated summaries repeat a token span back to back many times; the
repetition rate is the fraction of summary tokens inside such runs, and the
effective length is the token count scaled by one minus that rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


def tokenize_words(text: str) -> list[str]:
    """Split on Unicode whitespace; repeated separators collapse."""
    return text.split()


@dataclass(frozen=True)
class RepetitionRun:
    """A maximal stretch where one token span repeats back to back."""

    start_token: int
    span_length_tokens: int
    occurrence_count: int

    @property
    def token_coverage(self) -> int:
        return self.span_length_tokens * self.occurrence_count


@dataclass(frozen=True)
class RepetitionReport:
    runs: tuple[RepetitionRun, ...]
    repeated_token_count: int
    repetition_rate: float


def detect_repetition(tokens: Sequence[str], min_occurrences: int = 4,
                      min_span: int = 1, count_first_occurrence: bool = True) -> RepetitionReport:
    """Find token spans repeated consecutively at least ``min_occurrences`` times.

    Every (start, period) pair is a candidate run whose occurrence count is
    the maximal number of back-to-back copies of ``tokens[start:start+period]``
    starting at ``start``.  Candidates reaching the occurrence threshold are
    kept; overlaps are resolved by preferring the run covering more tokens,
    then the leftmost, then the shortest period, and losers are dropped
    whole.  With ``count_first_occurrence`` (the default) every copy in a
    run counts toward the repeated-token total, not just the repeats.
    """
    if min_occurrences < 2:
        raise ValueError("min_occurrences must be at least 2")
    if min_span < 1:
        raise ValueError("min_span must be at least 1")
    n = len(tokens)
    candidates: list[tuple[int, int, int, int]] = []  # (-coverage, start, period, count)
    for start in range(n):
        # a run needs min_occurrences full copies, which bounds the period
        max_period = (n - start) // min_occurrences
        for period in range(min_span, max_period + 1):
            span = tokens[start:start + period]
            count = 1
            pos = start + period
            while tokens[pos:pos + period] == span:
                count += 1
                pos += period
            if count >= min_occurrences:
                candidates.append((-(count * period), start, period, count))

    candidates.sort()
    covered = [False] * n
    runs: list[RepetitionRun] = []
    repeated = 0
    for neg_coverage, start, period, count in candidates:
        end = start + count * period
        if any(covered[start:end]):
            continue
        for i in range(start, end):
            covered[i] = True
        runs.append(RepetitionRun(start, period, count))
        repeated += count * period if count_first_occurrence else (count - 1) * period

    runs.sort(key=lambda r: r.start_token)
    rate = repeated / n if n else 0.0
    return RepetitionReport(tuple(runs), repeated, rate)


def effective_length(summary_tokens: int, repetition_rate: float) -> float:
    """Token count of the non-repetitive portion of a summary."""
    if not 0.0 <= repetition_rate <= 1.0:
        raise ValueError(f"repetition_rate must be in [0, 1], got {repetition_rate}")
    return summary_tokens * (1.0 - repetition_rate)
