"""Text-similarity and classification metrics for judging the automation.

ROUGE works over lowercased whitespace tokens.  Unlabeled argument (UA)
detection greedily matches generated answer spans to gold ones by token
intersection-over-union and counts a match at IoU >= 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

from .errors import InputError


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "PRF":
        total = precision + recall
        f1 = 2 * precision * recall / total if total > 0 else 0.0
        return cls(precision, recall, f1)


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def rouge_n(candidate: str, reference: str, n: int) -> PRF:
    """Clipped n-gram overlap; recall over reference counts, precision over candidate's."""
    if n < 1:
        raise InputError(f"n must be positive, got {n}")
    cand = _ngrams(_tokens(candidate), n)
    ref = _ngrams(_tokens(reference), n)
    if not ref:
        raise InputError(f"reference has fewer than {n} tokens; recall undefined")
    ref_counts: dict[tuple[str, ...], int] = {}
    for g in ref:
        ref_counts[g] = ref_counts.get(g, 0) + 1
    cand_counts: dict[tuple[str, ...], int] = {}
    for g in cand:
        cand_counts[g] = cand_counts.get(g, 0) + 1
    overlap = sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
    precision = overlap / len(cand) if cand else 0.0
    recall = overlap / len(ref)
    return PRF.from_pr(precision, recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for ai in a:
        cur = [0]
        for j, bj in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if ai == bj else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> PRF:
    """Longest-common-subsequence overlap over word tokens."""
    cand = _tokens(candidate)
    ref = _tokens(reference)
    lcs = _lcs_length(cand, ref)
    precision = lcs / len(cand) if cand else 0.0
    recall = lcs / len(ref) if ref else 0.0
    return PRF.from_pr(precision, recall)


def _token_set(span: str) -> frozenset[str]:
    return frozenset(_tokens(span))


def _iou(a: frozenset[str], b: frozenset[str]) -> float:
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def ua_score(generated_answers: Sequence[str], gold_answers: Sequence[str],
             threshold: float = 0.5) -> PRF:
    """One-to-one greedy answer matching by token-set IoU.

    Candidate pairs at or above the threshold are matched in descending IoU
    order; ties are broken on the sorted token content of the spans, so the
    result does not depend on input order.
    """
    gen_sets = [_token_set(a) for a in generated_answers]
    gold_sets = [_token_set(a) for a in gold_answers]
    candidates = []
    for gi, g in enumerate(gen_sets):
        for ki, k in enumerate(gold_sets):
            iou = _iou(g, k)
            if iou >= threshold:
                candidates.append((-iou, tuple(sorted(g)), tuple(sorted(k)), gi, ki))
    candidates.sort()
    used_gen: set[int] = set()
    used_gold: set[int] = set()
    matches = 0
    for _, _, _, gi, ki in candidates:
        if gi in used_gen or ki in used_gold:
            continue
        used_gen.add(gi)
        used_gold.add(ki)
        matches += 1
    precision = matches / len(gen_sets) if gen_sets else 0.0
    recall = matches / len(gold_sets) if gold_sets else 0.0
    return PRF.from_pr(precision, recall)


def micro_f1(predicted: Sequence[Hashable], gold: Sequence[Hashable]) -> float:
    """Micro-averaged F1 over all classes (equals accuracy for single-label data)."""
    if len(predicted) != len(gold):
        raise InputError(f"length mismatch: {len(predicted)} vs {len(gold)}")
    if not predicted:
        raise InputError("micro_f1 needs at least one pair")
    classes = set(predicted) | set(gold)
    tp = fp = fn = 0
    for c in classes:
        for p, g in zip(predicted, gold):
            if p == c and g == c:
                tp += 1
            elif p == c:
                fp += 1
            elif g == c:
                fn += 1
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def serialize_qa_list(qas: Sequence[tuple[str, Sequence[str]]]) -> str:
    """One "question answer..." line per QA, in generation order."""
    return "\n".join(f"{question} {' '.join(answers)}" for question, answers in qas)


def eval_qagen(generated: Mapping[Hashable, Sequence[tuple[str, Sequence[str]]]],
               gold: Mapping[Hashable, Sequence[tuple[str, Sequence[str]]]],
               ua_threshold: float = 0.5,
               external: Mapping[str, Mapping[Hashable, float]] | None = None) -> dict:
    """Score generated QAs against gold, macro-averaged over predicates.

    Both mappings are keyed by the same predicate alignment keys and map to
    lists of (question, answers).  Per predicate, the serialized QA lists
    are compared with ROUGE-L and pooled answers with UA; both reported as
    F1 on a percent scale.  ``external`` carries per-predicate scores
    computed elsewhere (embedding metrics need a model this package does
    not bundle); each series is macro-averaged over the same predicates.
    """
    missing = sorted(set(gold) - set(generated), key=repr)
    if missing:
        raise InputError(f"generated output missing predicates: {missing[:10]}")
    extra = sorted(set(generated) - set(gold), key=repr)
    if extra:
        raise InputError(f"generated output has unaligned predicates: {extra[:10]}")
    if not gold:
        raise InputError("no predicates to evaluate")
    rouge_f1s = []
    ua_f1s = []
    for key in gold:
        gen_qas = list(generated[key])
        gold_qas = list(gold[key])
        gen_text = serialize_qa_list(gen_qas)
        gold_text = serialize_qa_list(gold_qas)
        if not gen_text.strip():
            rouge_f1s.append(0.0)
        else:
            rouge_f1s.append(rouge_l(gen_text, gold_text).f1)
        gen_answers = [a for _, answers in gen_qas for a in answers]
        gold_answers = [a for _, answers in gold_qas for a in answers]
        ua_f1s.append(ua_score(gen_answers, gold_answers, ua_threshold).f1)
    count = len(gold)
    report = {
        "rouge_l": 100.0 * math.fsum(rouge_f1s) / count,
        "ua": 100.0 * math.fsum(ua_f1s) / count,
        "predicates": count,
    }
    for name, scores in (external or {}).items():
        missing = sorted(set(gold) - set(scores), key=repr)
        if missing:
            raise InputError(f"external scores {name!r} missing predicates: "
                             f"{missing[:10]}")
        report[name] = 100.0 * math.fsum(scores[key] for key in gold) / count
    return report


def load_external_pair_scores(path) -> dict[tuple[str, int, int], float]:
    """Per-predicate scores computed outside this package.

    Tab-separated rows: example_id, sentence_index, token_index, score.
    """
    from pathlib import Path

    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    scores: dict[tuple[str, int, int], float] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                key = (parts[0], int(parts[1]), int(parts[2]))
                value = float(parts[3])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: bad row ({exc})") from exc
            if key in scores:
                raise InputError(f"{path}:{lineno}: duplicate predicate {key}")
            scores[key] = value
    return scores
