"""Acceptance gate: every release criterion, one pass/fail line each.

Run with plain pytest; criterion results are written straight to the real
stderr so they appear even under output capture.  The heavyweight checks
(exhaustive repetition scan, 10^4-case fuzzes, the 500-task workflow
simulation) live here rather than in the per-module suites.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
import random
import time
from fractions import Fraction
from pathlib import Path

import pytest
from click.testing import CliRunner

from qapyramid import metaeval, scoring
from qapyramid.annotate import AnnotationService
from qapyramid.cli import main as cli_main
from qapyramid.corpus import SystemSummary, export_dataset
from qapyramid.errors import InputError
from qapyramid.evalmetrics import micro_f1, rouge_l, rouge_n, ua_score
from qapyramid.llmclient import load_prompt_template, render_template
from qapyramid.presence import render_presence_prompt, render_statement_prompt
from qapyramid.qagen import render_qa_generation_prompt
from qapyramid.scoring import (length_penalty, normalized_score, qapyramid_score,
                               render_2dp, unit_score)
from qapyramid.textproc import detect_repetition

import conftest
from conftest import make_reference
from oracles import (brute_kendall_tau_b, brute_krippendorff, brute_lcs_length,
                     brute_micro_f1, brute_pearson, brute_repetition_token_count,
                     brute_rouge_n_counts, brute_ua_matches)

SEED = 20260809


def criterion(name):
    """Record one pass/fail line per criterion for the terminal summary."""
    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                conftest.ACCEPTANCE_RESULTS.append((name, False))
                raise
            conftest.ACCEPTANCE_RESULTS.append((name, True))
            return result
        return wrapper
    return decorator


# ---------------------------------------------------------------------------
# criterion 1: worked-figure parity

# presence marks transcribed from the three worked examples
PEGASUS_QA_MARKS = [True] * 6 + [False, True, True, False, True, False,
                                 False, False, False, True]           # 10 of 16
PEGASUS_ACU_MARKS = [False, True] + [False] * 9                       # 1 of 11
BRIO_EXT_QA_MARKS = [True] * 9 + [False] * 2                          # 9 of 11
BRIO_EXT_ACU_MARKS = [True, False, False, True, True, False, False]   # 3 of 7
MATCHSUM_QA_MARKS = [False, False, True, True, False, False, False, True, True,
                     True, True, True, True, True, False, False, False, True,
                     True, True]                                      # 12 of 20
MATCHSUM_ACU_MARKS = [True, False, False, True, True, False, False, False,
                      False]                                          # 3 of 9


@criterion("worked-figure parity (QAPyramid 0.63/0.82/0.60, ACU 0.09/0.43/0.33)")
def test_worked_figure_parity():
    start = time.perf_counter()
    assert qapyramid_score(PEGASUS_QA_MARKS) == Fraction(10, 16)
    assert render_2dp(qapyramid_score(PEGASUS_QA_MARKS)) == "0.63"
    assert qapyramid_score(BRIO_EXT_QA_MARKS) == Fraction(9, 11)
    assert render_2dp(qapyramid_score(BRIO_EXT_QA_MARKS)) == "0.82"
    assert qapyramid_score(MATCHSUM_QA_MARKS) == Fraction(12, 20)
    assert render_2dp(qapyramid_score(MATCHSUM_QA_MARKS)) == "0.60"
    assert unit_score(PEGASUS_ACU_MARKS) == Fraction(1, 11)
    assert render_2dp(unit_score(PEGASUS_ACU_MARKS)) == "0.09"
    assert unit_score(BRIO_EXT_ACU_MARKS) == Fraction(3, 7)
    assert render_2dp(unit_score(BRIO_EXT_ACU_MARKS)) == "0.43"
    assert unit_score(MATCHSUM_ACU_MARKS) == Fraction(3, 9)
    assert render_2dp(unit_score(MATCHSUM_ACU_MARKS)) == "0.33"
    assert time.perf_counter() - start < 1.0


# ---------------------------------------------------------------------------
# criterion 2: penalty math

@criterion("penalty math (clamping, e^(-1/6) at ratio 2, normalized <= raw on 1e4 records)")
def test_penalty_math():
    rng = random.Random(SEED)
    for _ in range(2000):
        reference = rng.randint(1, 200)
        effective_ratio = rng.uniform(0.0, 1.0)
        summary = effective_ratio * reference
        assert length_penalty(summary, reference, 1.0, rng.uniform(0.5, 10)) == 1.0
    assert abs(length_penalty(114, 57, 1.0, 6.0) - math.exp(-1 / 6)) <= 1e-12
    assert abs(length_penalty(200, 100, 1.0, 6.0) - math.exp(-1 / 6)) <= 1e-12

    for _ in range(10_000):
        total = rng.randint(1, 40)
        present = rng.randint(0, total)
        raw = qapyramid_score([True] * present + [False] * (total - present))
        p_r = rng.uniform(0.0, 1.0)
        p_l = length_penalty(rng.randint(0, 500), rng.randint(1, 200), p_r,
                             rng.uniform(0.5, 10.0))
        assert normalized_score(float(raw), p_r, p_l) <= float(raw) + 1e-15


# ---------------------------------------------------------------------------
# criterion 3: repetition rule vs brute force

@criterion("repetition rule (exhaustive length<=12 over 3 symbols + 1e4 random strings)")
def test_repetition_rule_agreement():
    for n in range(0, 13):
        for tokens in itertools.product("abc", repeat=n):
            t = list(tokens)
            assert (detect_repetition(t).repeated_token_count
                    == brute_repetition_token_count(t)), t
    rng = random.Random(SEED)
    for _ in range(10_000):
        alphabet = "abc"[:rng.randint(1, 3)]
        tokens = [rng.choice(alphabet) for _ in range(rng.randint(0, 100))]
        assert (detect_repetition(tokens).repeated_token_count
                == brute_repetition_token_count(tokens)), tokens


# ---------------------------------------------------------------------------
# criterion 4: alpha calibration vs brute-force sweep

@criterion("alpha calibration equals brute-force argmin on 100 seeded datasets")
def test_alpha_calibration_against_sweep():
    # paper-reported sweep values and alpha=6 are reference context only;
    # they require the original judgments and are not desk-reproducible
    grid = [float(a) for a in range(1, 11)]
    for seed in range(100):
        rng = random.Random(seed)
        records = []
        for _ in range(rng.randint(10, 60)):
            reference = rng.randint(30, 90)
            effective = rng.uniform(10, 4 * reference)
            raw = rng.uniform(0.05, 1.0) * min(1.0, effective / reference)
            records.append((raw, effective, reference))
        calibration = scoring.calibrate_alpha(records, grid)
        best = None
        for alpha in grid:
            xs = [eff for _, eff, _ in records]
            ys = [math.exp(min(0.0, (1 - eff / ref) / alpha)) * raw
                  for raw, eff, ref in records]
            r = brute_pearson(xs, ys)
            if best is None or (abs(r), alpha) < best[0]:
                best = ((abs(r), alpha), alpha)
        assert calibration.chosen_alpha == best[1], seed


# ---------------------------------------------------------------------------
# criterion 5: statistics vs independent oracles

@criterion("statistics oracles (tau-b, pearson, alpha, micro-F1, ROUGE, UA at 1e-9)")
def test_statistics_match_oracles():
    rng = random.Random(SEED)
    assert metaeval.krippendorff_alpha_binary(
        [[1, 1, 1], [0, 0, 0], [1, 1, 0]]) == 0.6

    for _ in range(400):
        n = rng.randint(2, 8)
        x = [rng.randint(0, 5) for _ in range(n)]
        y = [rng.randint(0, 5) for _ in range(n)]
        expected = brute_kendall_tau_b(x, y)
        if expected is not None:
            assert abs(metaeval.kendall_tau_b(x, y) - expected) <= 1e-9

        xf = [rng.randint(-40, 40) / 8 for _ in range(n)]
        yf = [rng.randint(-40, 40) / 8 for _ in range(n)]
        if len(set(xf)) > 1 and len(set(yf)) > 1:
            assert abs(metaeval.pearson(xf, yf) - brute_pearson(xf, yf)) <= 1e-9

        items = [[rng.randint(0, 1) for _ in range(rng.randint(2, 3))]
                 for _ in range(rng.randint(2, 8))]
        pooled = [v for item in items for v in item]
        if len(set(pooled)) > 1:
            assert abs(metaeval.krippendorff_alpha_binary(items)
                       - brute_krippendorff(items)) <= 1e-9

        labels_a = [rng.choice("pn") for _ in range(n)]
        labels_b = [rng.choice("pn") for _ in range(n)]
        assert abs(micro_f1(labels_a, labels_b)
                   - brute_micro_f1(labels_a, labels_b)) <= 1e-9

        vocab = "abcde"
        cand = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        ref = [rng.choice(vocab) for _ in range(rng.randint(1, 8))]
        ngram_n = rng.randint(1, 2)
        if len(ref) >= ngram_n:
            overlap, cand_count, ref_count = brute_rouge_n_counts(cand, ref, ngram_n)
            prf = rouge_n(" ".join(cand), " ".join(ref), ngram_n)
            assert abs(prf.recall - overlap / ref_count) <= 1e-9
            expected_p = overlap / cand_count if cand_count else 0.0
            assert abs(prf.precision - expected_p) <= 1e-9

        lcs = brute_lcs_length(cand, ref)
        prf = rouge_l(" ".join(cand), " ".join(ref))
        assert abs(prf.recall - lcs / len(ref)) <= 1e-9

        gen_spans = [" ".join(rng.choice(vocab) for _ in range(rng.randint(1, 3)))
                     for _ in range(rng.randint(0, 5))]
        gold_spans = [" ".join(rng.choice(vocab) for _ in range(rng.randint(1, 3)))
                      for _ in range(rng.randint(0, 5))]
        matches = brute_ua_matches(gen_spans, gold_spans)
        prf = ua_score(gen_spans, gold_spans)
        if gen_spans:
            assert abs(prf.precision - matches / len(gen_spans)) <= 1e-9
        if gold_spans:
            assert abs(prf.recall - matches / len(gold_spans)) <= 1e-9


# ---------------------------------------------------------------------------
# criterion 6: protocol-rule conformance under a simulated workload

class WorkloadDriver:
    """Three qualified workers grind a project to completion.

    The driver tracks everything it submits and checks the protocol rules
    from the outside: caps, both-verifier validity, requeue of sparse
    predicates, three-way majorities, the self-verification ban, and the
    one-predicate shape of presence tasks.
    """

    WORKERS = ("wa", "wb", "wc")

    def __init__(self, seed):
        self.rng = random.Random(seed)
        self.svc = AnnotationService()
        self.violations: list[str] = []
        self.predicate_writer: dict[tuple, str] = {}   # (ex, si, ti, attempt) -> worker
        self.sparse_predicates: set[tuple] = set()     # should trigger requeue
        self.duplicate_qas: set[str] = set()
        self.qa_predicate: dict[str, tuple] = {}
        self.qa_verdicts: dict[str, list[bool]] = {}
        self.qa_dup_flag: dict[str, bool] = {}
        self.presence_votes: dict[tuple, list[str]] = {}
        self.seen_requeues: set[tuple] = set()
        self.cap_rejections = 0

    def build_project(self, references=50):
        refs = []
        for i in range(references):
            sentences = [f"alpha{i} ran quickly .", f"beta{i} ate food ."]
            refs.append(make_reference(f"ex{i:03d}", sentences, [(0, 1), (1, 1)]))
        summaries = [SystemSummary(system, ref.example_id, ref.sentences[0].text)
                     for ref in refs for system in ("sysA", "sysB")]
        self.svc.create_project("sim", refs, summaries)
        for worker in self.WORKERS:
            for kind in ("qa_write", "qa_verify", "presence"):
                self.svc.qualify(worker, kind, True)

    # -- task handlers ----------------------------------------------------

    def handle_write(self, worker, task):
        payload = task["payload"]
        key = (payload["example_id"], payload["sentence_index"],
               payload["predicate"]["token_index"])
        attempt = task["attempt"]
        if attempt > 0:
            self.seen_requeues.add(key)
            for earlier in range(attempt):
                if self.predicate_writer.get(key + (earlier,)) == worker:
                    self.violations.append(f"requeued write handed back to {worker}")
        verb = payload["predicate"]["surface"]
        subject = payload["sentence"].split()[0]

        if attempt == 0 and self.rng.random() < 0.06:
            over_cap = {"qas": [{"question": f"Q{i}?", "answers": ["x"]}
                                for i in range(6)]}
            try:
                self.svc.submit(task["task_id"], worker, over_cap)
                self.violations.append("6-question batch accepted")
            except InputError:
                self.cap_rejections += 1
        if attempt == 0 and self.rng.random() < 0.06:
            fat_answers = {"qas": [{"question": "Who?",
                                    "answers": ["a", "b", "c", "d"]}]}
            try:
                self.svc.submit(task["task_id"], worker, fat_answers)
                self.violations.append("4-answer QA accepted")
            except InputError:
                self.cap_rejections += 1

        roll = self.rng.random()
        if attempt == 0 and roll < 0.15:
            qas = [{"question": f"Who {verb}?", "answers": [subject]}]
            self.sparse_predicates.add(key)
        elif attempt == 0 and roll < 0.25:
            qas = [{"question": f"Who {verb}?", "answers": [subject]},
                   {"question": f"What did {subject} do?", "answers": [verb]},
                   {"question": f"Who really {verb}?", "answers": [subject]}]
        else:
            qas = [{"question": f"Who {verb}?", "answers": [subject]},
                   {"question": f"What did {subject} do?", "answers": [verb]}]
        self.svc.submit(task["task_id"], worker, {"qas": qas})
        self.predicate_writer[key + (attempt,)] = worker

    def handle_verify(self, worker, task):
        payload = task["payload"]
        key = (payload["example_id"], payload["sentence_index"],
               payload["predicate"]["token_index"])
        writer = self.predicate_writer.get(key + (task["attempt"],))
        if writer == worker:
            self.violations.append(f"{worker} verified their own QA")
        qa_id = payload["qa"]["qa_id"]
        self.qa_predicate[qa_id] = key
        self.qa_dup_flag[qa_id] = bool(payload["duplicate_flag"])
        if payload["duplicate_flag"]:
            self.duplicate_qas.add(qa_id)
        verdict = self.rng.random() < 0.9
        self.qa_verdicts.setdefault(qa_id, []).append(verdict)
        self.svc.submit(task["task_id"], worker,
                        {"valid": verdict, "answer": "x" if verdict else ""})

    def handle_presence(self, worker, task):
        payload = task["payload"]
        predicates = {self.qa_predicate.get(qa["qa_id"]) for qa in payload["qas"]}
        if len(predicates) != 1 or None in predicates:
            self.violations.append("presence task mixes predicates")
        for qa in payload["qas"]:
            if qa["qa_id"] in self.duplicate_qas:
                self.violations.append("duplicate QA reached presence judging")
        labels = {}
        for qa in payload["qas"]:
            label = "present" if self.rng.random() < 0.6 else "not_present"
            labels[qa["qa_id"]] = label
            self.presence_votes.setdefault(
                (qa["qa_id"], payload["system_id"]), []).append(label)
        self.svc.submit(task["task_id"], worker, {"labels": labels})

    # -- main loop ----------------------------------------------------------

    def run(self):
        handlers = {"qa_write": self.handle_write, "qa_verify": self.handle_verify,
                    "presence": self.handle_presence}
        while True:
            progressed = False
            kinds = list(handlers)
            self.rng.shuffle(kinds)
            for kind in kinds:
                workers = list(self.WORKERS)
                self.rng.shuffle(workers)
                for worker in workers:
                    while True:
                        task = self.svc.next_task(worker, kind)
                        if task is None:
                            break
                        handlers[kind](worker, task)
                        progressed = True
            if not progressed:
                return

    # -- post-hoc checks ------------------------------------------------

    def check(self):
        export = self.svc.export_final("sim", partial=True)
        exported_qas = {qa["qa_id"] for qa in export["qas"]}
        for qa_id, verdicts in self.qa_verdicts.items():
            if len(verdicts) != 2:
                self.violations.append(f"{qa_id} got {len(verdicts)} verdicts")
                continue
            should_be_valid = all(verdicts) and not self.qa_dup_flag[qa_id]
            if should_be_valid != (qa_id in exported_qas):
                self.violations.append(f"{qa_id} validity disagrees with verdicts")

        judged = {(j["qa_id"], j["system_id"]): j["label"]
                  for j in export["judgments"]}
        for pair, votes in self.presence_votes.items():
            if len(votes) != 3:
                self.violations.append(f"{pair} received {len(votes)} presence votes")
                continue
            expected = "present" if votes.count("present") >= 2 else "not_present"
            if judged.get(pair) != expected:
                self.violations.append(f"{pair} judgment is not the majority")

        counts = self.svc.list_projects()[0]["tasks"]
        total_tasks = sum(counts.values())
        assert total_tasks >= 500, f"workload too small: {total_tasks}"
        assert self.cap_rejections > 0
        # a sparse predicate whose attempt-0 batch left <2 valid QAs must requeue
        for key in self.sparse_predicates:
            qa_ids = [q for q, p in self.qa_predicate.items() if p == key]
            attempt0_valid = sum(
                1 for q in qa_ids
                if len(self.qa_verdicts.get(q, [])) == 2
                and all(self.qa_verdicts[q]) and not self.qa_dup_flag[q])
            if attempt0_valid < 2 and key not in self.seen_requeues:
                self.violations.append(f"sparse predicate {key} was never requeued")
        assert not self.violations, self.violations[:10]
        return total_tasks


@criterion("protocol rules hold over a simulated 3-worker workload of >=500 tasks")
def test_protocol_conformance_simulation():
    driver = WorkloadDriver(SEED)
    driver.build_project(references=50)
    driver.run()
    total = driver.check()
    assert total >= 500


# ---------------------------------------------------------------------------
# criterion 7: prompt fidelity

EXPECTED_QA_GENERATION = (
    'Read the following sentence. Produce question-answer pairs for the '
    'specified verb. You must give answer in a structured format: "Question: '
    '[your question] Answer: [your answer]", where [your question] and [your '
    'answer] is your generated question and answer, respectively.\n'
    '[Sentence]\n{SENTENCE}\n[Verb]\n{VERB}')

EXPECTED_QA_PRESENCE = (
    'Read the following summary. Then read a question and an answer. Answer '
    'whether the question and answer pair can be inferred from the summary. '
    'Please strictly output either [YES] or [NO].\n'
    '[Summary]\n{SUMMARY}\n[Question]\n{QUESTION}\n[Answer]\n{ANSWER}')

EXPECTED_STATEMENT_PRESENCE = (
    'Read the following summary. Then read a statement. Answer whether the '
    'statement pair can be inferred from the summary. Please strictly output '
    'either [YES] or [NO].\n'
    '[Summary]\n{SUMMARY}\n[Statement]\n{STATEMENT}')

EXPECTED_QA_TO_STATEMENT = (
    'Convert the question and answer into a statement. Start your answer with '
    '"Statement:"\nQuestion: {QUESTION}\nAnswer: {ANSWER}')


@criterion("prompt templates byte-match the published wording modulo placeholders")
def test_prompt_fidelity():
    assert load_prompt_template("qa_generation") == EXPECTED_QA_GENERATION
    assert load_prompt_template("qa_presence") == EXPECTED_QA_PRESENCE
    assert load_prompt_template("statement_presence") == EXPECTED_STATEMENT_PRESENCE
    assert load_prompt_template("qa_to_statement") == EXPECTED_QA_TO_STATEMENT

    golden_dir = Path(__file__).parent / "golden"
    rendered = render_qa_generation_prompt(
        "Experts hail ' extraordinary achievement ' for British firm that "
        "developed it .", "developed")
    assert rendered == (golden_dir / "qa_generation_rendered.txt").read_text(
        encoding="utf-8").rstrip("\n")
    rendered = render_presence_prompt("The vaccine took 30 years to develop .",
                                      "What did something develop?", "it")
    assert rendered == (golden_dir / "qa_presence_rendered.txt").read_text(
        encoding="utf-8").rstrip("\n")
    rendered = render_statement_prompt("The vaccine took 30 years to develop .",
                                       "Something developed it.")
    assert rendered == (golden_dir / "statement_presence_rendered.txt").read_text(
        encoding="utf-8").rstrip("\n")
    rendered = render_template(load_prompt_template("qa_to_statement"),
                               QUESTION="What did something develop?", ANSWER="it")
    assert rendered == (golden_dir / "qa_to_statement_rendered.txt").read_text(
        encoding="utf-8").rstrip("\n")


# ---------------------------------------------------------------------------
# criterion 8: CLI determinism

@criterion("CLI commands are byte-identical across runs with fixed seed and warm cache")
def test_cli_determinism(tmp_path, toy_corpus):
    references, summaries, qas, judgments = toy_corpus
    paths = {}
    for name, records, kind in [("references", references, "references"),
                                ("summaries", summaries, "summaries"),
                                ("qas", qas, "qas"),
                                ("judgments", judgments, "judgments")]:
        paths[name] = tmp_path / f"{name}.jsonl"
        export_dataset(records, kind, paths[name])

    gold_matrix = tmp_path / "gold.tsv"
    rng = random.Random(SEED)
    gold_matrix.write_text(
        "".join(f"s{i}\te{j}\t{rng.random():.4f}\n"
                for i in range(3) for j in range(3)), encoding="utf-8")
    calib = tmp_path / "calib.jsonl"
    calib.write_text("".join(
        json.dumps({"raw_score": rng.uniform(0.1, 1), "effective_length":
                    rng.uniform(20, 200), "reference_length": 60}) + "\n"
        for _ in range(20)), encoding="utf-8")

    cache = tmp_path / "cache"
    commands = [
        ["score", "--references", str(paths["references"]),
         "--summaries", str(paths["summaries"]), "--qas", str(paths["qas"]),
         "--judgments", str(paths["judgments"])],
        ["gen-qa", "--references", str(paths["references"]),
         "--backend", f"gold:{paths['qas']}", "--seed", "7"],
        ["presence", "--qas", str(paths["qas"]),
         "--summaries", str(paths["summaries"]),
         "--backend", "lexical", "--seed", "7", "--cache-dir", str(cache)],
        ["calibrate-alpha", "--records", str(calib)],
        ["eval-qagen", "--generated", str(paths["qas"]), "--gold", str(paths["qas"])],
        ["eval-presence", "--predicted", str(paths["judgments"]),
         "--gold", str(paths["judgments"])],
        ["meta-eval", "--gold", str(gold_matrix), "--metric", f"self={gold_matrix}"],
    ]
    runner = CliRunner()
    for args in commands:
        if args[0] == "presence":
            runner.invoke(cli_main, args)  # warm the cache first
        first = runner.invoke(cli_main, args)
        second = runner.invoke(cli_main, args)
        assert first.exit_code == 0, (args, first.output)
        assert second.exit_code == 0
        assert first.stdout == second.stdout, args


# ---------------------------------------------------------------------------
# criterion 9: identity validation stands in for paper-scale results

@criterion("meta-evaluation validated by gold-vs-gold identity (paper tables are "
           "reference context, not desk-reproducible)")
def test_gold_vs_gold_identity():
    rng = random.Random(SEED)
    triples = [(f"s{i}", f"e{j}", rng.random())
               for i in range(10) for j in range(8)]
    gold = metaeval.MetricMatrix.from_records(triples, "gold")
    groups = metaeval.standard_groups([f"s{i}" for i in range(5)],
                                      [f"s{i}" for i in range(5, 10)])
    report = metaeval.correlation_report([gold], gold, groups)
    for cell in report.rows["gold"]:
        assert cell.value == pytest.approx(1.0)
    rendered = report.render()
    data_row = rendered.splitlines()[1]
    assert data_row.split("\t")[1:] == ["1.000"] * 6
