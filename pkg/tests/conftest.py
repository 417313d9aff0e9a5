from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qapyramid.corpus import (PredicateSpan, PresenceJudgment, QAPair,
                              ReferenceSummary, Sentence, SystemSummary)

# filled by the acceptance suite; rendered after the run ends
ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, ok in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}")


def make_reference(example_id: str, sentences: list[str],
                   predicates: list[tuple[int, int]]) -> ReferenceSummary:
    """Build a reference from sentence strings and (sentence, token) indices."""
    sentence_objs = tuple(Sentence(i, text) for i, text in enumerate(sentences))
    spans = tuple(PredicateSpan(si, ti, sentences[si].split()[ti])
                  for si, ti in predicates)
    return ReferenceSummary(example_id=example_id, text=" ".join(sentences),
                            sentences=sentence_objs, predicates=spans)


@pytest.fixture
def toy_corpus():
    """Two references, two systems, QAs, and unanimous judgments."""
    ref1 = make_reference("ex1", ["John ran home .", "Mary ate the pie ."],
                          [(0, 1), (1, 1)])
    ref2 = make_reference("ex2", ["The dog barked loudly ."], [(0, 2)])
    references = [ref1, ref2]
    summaries = [
        SystemSummary("sysA", "ex1", "John ran home and Mary ate a pie ."),
        SystemSummary("sysA", "ex2", "A dog barked ."),
        SystemSummary("sysB", "ex1", "Mary ate the pie ."),
        SystemSummary("sysB", "ex2", ""),
    ]
    qas = [
        QAPair("qa1", "ex1", 0, ref1.predicates[0], "Who ran?", ("John",), "valid"),
        QAPair("qa2", "ex1", 0, ref1.predicates[0], "Where did someone run?",
               ("home",), "valid"),
        QAPair("qa3", "ex1", 1, ref1.predicates[1], "Who ate something?",
               ("Mary",), "valid"),
        QAPair("qa4", "ex1", 1, ref1.predicates[1], "What did someone eat?",
               ("the pie",), "valid"),
        QAPair("qa5", "ex2", 0, ref2.predicates[0], "Who barked?",
               ("The dog",), "valid"),
        QAPair("qa6", "ex2", 0, ref2.predicates[0], "How did something bark?",
               ("loudly",), "valid"),
    ]
    present = {
        ("qa1", "sysA"): "present", ("qa2", "sysA"): "present",
        ("qa3", "sysA"): "present", ("qa4", "sysA"): "present",
        ("qa5", "sysA"): "present", ("qa6", "sysA"): "not_present",
        ("qa1", "sysB"): "not_present", ("qa2", "sysB"): "not_present",
        ("qa3", "sysB"): "present", ("qa4", "sysB"): "present",
        ("qa5", "sysB"): "not_present", ("qa6", "sysB"): "not_present",
    }
    judgments = [PresenceJudgment(qa_id, system_id, "gold", label)
                 for (qa_id, system_id), label in sorted(present.items())]
    return references, summaries, qas, judgments


# ---------------------------------------------------------------------------
# appendix worked example: PEGASUS summary of the vaccine reference

PEGASUS_SENTENCES = [
    "Vaccine named RTS , S could be available by October , scientists believe .",
    "Will become the first approved vaccine for the world 's deadliest disease .",
    "Designed for use in children in Africa , it can prevent up to half of cases .",
    "Experts hail ' extraordinary achievement ' for British firm that developed it .",
]

# (sentence_index, token_index) anchors for the nine judged predicates
PEGASUS_PREDICATES = [
    (0, 1),   # named
    (0, 7),   # available
    (0, 12),  # believe
    (1, 1),   # become
    (1, 4),   # approved
    (2, 0),   # Designed
    (2, 10),  # prevent
    (3, 1),   # hail
    (3, 10),  # developed
]

# question, answer, predicate position in PEGASUS_PREDICATES, present?
PEGASUS_QAS = [
    ("What could be available?", "Vaccine named RTS , S", 1, True),
    ("When could something be available?", "by October", 1, True),
    ("What is named something?", "Vaccine", 0, True),
    ("What is something named?", "RTS , S", 0, True),
    ("Who believes something?", "scientists", 2, True),
    ("What does someone believe?",
     "Vaccine named RTS , S could be available by October", 2, True),
    ("What will something become?",
     "the first approved vaccine for the world 's deadliest disease", 3, False),
    ("What will be approved?", "vaccine", 4, True),
    ("What was designed?", "it", 5, True),
    ("What was something designed for?", "use in children in Africa", 5, False),
    ("What can prevent something?", "it", 6, True),
    ("How many can something prevent?", "half of cases", 6, False),
    ("What does someone hail?", "extraordinary achievement", 7, False),
    ("Who hail something?", "Experts", 7, False),
    ("What developed something?", "British firm", 8, False),
    ("What did something develop?", "it", 8, True),
]

PEGASUS_SUMMARY = (
    "The vaccine , known as RTS , S , took 30 years to develop but it is now "
    "hoped it can be used to save millions of lives . Scientists have worked on "
    "the vaccine for more than 20 years at a cost of more than £330million . "
    "There is no licensed vaccine against malaria anywhere in the world . "
    "Researchers say they are hopeful the results will be sufficient for RTS , S "
    "to gain a licence from the EMA . The World Health Organisation could then "
    "recommend its use by October this year ."
)


@pytest.fixture
def pegasus_example():
    reference = make_reference("cnndm-pegasus", PEGASUS_SENTENCES, PEGASUS_PREDICATES)
    qas = []
    judgments = []
    for index, (question, answer, pred_pos, present) in enumerate(PEGASUS_QAS):
        qa = QAPair(qa_id=f"peg-{index:02d}", example_id=reference.example_id,
                    sentence_index=reference.predicates[pred_pos].sentence_index,
                    predicate=reference.predicates[pred_pos],
                    question=question, answers=(answer,), status="valid")
        qas.append(qa)
        judgments.append(PresenceJudgment(qa.qa_id, "PEGASUS", "gold",
                                          "present" if present else "not_present"))
    summary = SystemSummary("PEGASUS", reference.example_id, PEGASUS_SUMMARY)
    return reference, summary, qas, judgments
