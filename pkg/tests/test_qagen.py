from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qapyramid.corpus import PredicateSpan, QAPair
from qapyramid.errors import InputError, ParseError
from qapyramid.llmclient import ChatCompletionClient, JsonServiceClient
from qapyramid.qagen import (FewShotPool, GoldFileBackend, LexiconTaggerBackend,
                             QAGenShot, RemoteLLMBackend, RemoteParserBackend,
                             dedup_qas, extract_predicates, generate_qas,
                             mark_duplicates, parse_qa_output,
                             render_qa_generation_prompt, render_shot_output,
                             select_fewshot, validate_qa)

GOLDEN = Path(__file__).parent / "golden"


def make_qa(question, answers, qa_id="q", token_index=1, surface="ran"):
    return QAPair(qa_id=qa_id, example_id="ex", sentence_index=0,
                  predicate=PredicateSpan(0, token_index, surface),
                  question=question, answers=tuple(answers))


def scripted_client(replies):
    """Chat client whose POSTs return the given contents in order."""
    replies = list(replies)
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        content = replies.pop(0)
        return httpx.Response(200, json={
            "choices": [{"message": {"role": "assistant", "content": content}}]})

    client = ChatCompletionClient("http://llm.test/v1/chat/completions",
                                  model="test-model", api_key="k",
                                  transport=httpx.MockTransport(handler), backoff=0)
    return client, calls


# ---------------------------------------------------------------------------
# parsing

def test_parse_single_block():
    assert parse_qa_output("Question: Who ran? Answer: John") == [("Who ran?", ["John"])]


def test_parse_two_stacked_blocks():
    raw = "Question: Who ran?\nAnswer: John\n\nQuestion: Where?\nAnswer: home\n"
    assert parse_qa_output(raw) == [("Who ran?", ["John"]), ("Where?", ["home"])]


def test_parse_no_blocks_is_an_error():
    with pytest.raises(ParseError) as err:
        parse_qa_output("no questions apply")
    assert err.value.raw == "no questions apply"


def test_parse_accumulates_answers_up_to_three():
    raw = "Question: Q? Answer: a Answer: b Answer: c Answer: d"
    assert parse_qa_output(raw) == [("Q?", ["a", "b", "c"])]


def test_parse_is_case_insensitive_and_prose_tolerant():
    raw = "Sure, here you go.\nQUESTION: Who ran?\nanswer: John\nHope this helps!"
    assert parse_qa_output(raw) == [("Who ran?", ["John\nHope this helps!"])]


safe_text = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters=" "),
    min_size=1, max_size=25).map(str.strip).filter(bool)


@given(st.lists(st.tuples(safe_text, st.lists(safe_text, min_size=1, max_size=3)),
                min_size=1, max_size=5))
@settings(max_examples=200, deadline=None)
def test_parse_inverts_rendering(qas):
    rendered = render_shot_output([(q, a) for q, a in qas])
    assert parse_qa_output(rendered) == [(q, list(a)) for q, a in qas]


# ---------------------------------------------------------------------------
# validation

def test_six_questions_reject_the_batch():
    qas = [make_qa(f"Q{i}?", ["a"], qa_id=f"q{i}") for i in range(6)]
    result = validate_qa(qas, "John ran home .")
    assert not result.batch_ok
    assert all(not v.ok for v in result.verdicts)


def test_four_answers_reject_the_qa():
    qas = [make_qa("Q?", ["a", "b", "c", "d"])]
    result = validate_qa(qas, "John ran home .")
    assert result.batch_ok
    assert not result.verdicts[0].ok


def test_zero_answers_reject_the_qa():
    result = validate_qa([make_qa("Q?", [])], "John ran home .")
    assert not result.verdicts[0].ok


def test_strict_mode_accepts_contiguous_answer():
    sentence = ("Experts hail ' extraordinary achievement ' for British firm "
                "that developed it .")
    qas = [make_qa("What developed something?", ["British firm"],
                   token_index=10, surface="developed")]
    result = validate_qa(qas, sentence, strict=True)
    assert result.verdicts[0].ok


def test_strict_mode_rejects_non_span_answer():
    result = validate_qa([make_qa("Who ran?", ["Johnny"])], "John ran home .",
                         strict=True)
    assert not result.verdicts[0].ok


def test_strict_mode_requires_question_mark():
    result = validate_qa([make_qa("Who ran", ["John"])], "John ran home .",
                         strict=True)
    assert not result.verdicts[0].ok


def test_mixed_predicates_are_rejected():
    qas = [make_qa("Q?", ["a"]), make_qa("Q2?", ["b"], token_index=2, surface="home")]
    with pytest.raises(InputError):
        validate_qa(qas, "John ran home .")


@given(st.lists(st.tuples(safe_text, st.lists(safe_text, min_size=0, max_size=5)),
                min_size=0, max_size=8))
@settings(max_examples=200, deadline=None)
def test_caps_always_enforced(batch):
    qas = [make_qa(q if q.endswith("?") else q + "?", a, qa_id=f"q{i}")
           for i, (q, a) in enumerate(batch)]
    result = validate_qa(qas, "John ran home .")
    if len(qas) > 5:
        assert not result.batch_ok
    for qa, verdict in zip(qas, result.verdicts):
        if not 1 <= len(qa.answers) <= 3:
            assert not verdict.ok


# ---------------------------------------------------------------------------
# dedup

def test_exact_duplicate_flagged():
    qas = [make_qa("Who ran?", ["John"], "q1"), make_qa("Who ran?", ["John"], "q2")]
    assert dedup_qas(qas) == [False, True]


def test_rephrased_duplicate_flagged():
    qas = [make_qa("Who ran?", ["John"], "q1"),
           make_qa("Who was running?", ["John"], "q2")]
    assert dedup_qas(qas) == [False, True]


def test_different_wh_class_and_answers_kept():
    qas = [make_qa("Who ran?", ["John"], "q1"),
           make_qa("Where did someone run?", ["home"], "q2")]
    assert dedup_qas(qas) == [False, False]


def test_who_and_what_share_a_class_but_when_does_not():
    qas = [make_qa("Who ran?", ["John"], "q1"),
           make_qa("What ran?", ["John"], "q2"),
           make_qa("When did someone run?", ["John"], "q3")]
    assert dedup_qas(qas) == [False, True, False]


def test_mark_duplicates_preserves_originals():
    qas = [make_qa("Who ran?", ["John"], "q1"), make_qa("Who ran?", ["John"], "q2")]
    marked = mark_duplicates(qas)
    assert marked[0].status == "draft"
    assert marked[1].status == "duplicate"
    assert len(marked) == 2


# ---------------------------------------------------------------------------
# few-shot selection

def _pool():
    return FewShotPool(examples=tuple(
        QAGenShot(f"ref{i % 3}", f"sentence {i}", "ran", (("Q?", ("a",)),))
        for i in range(9)))


def test_select_excludes_target_reference():
    pool = FewShotPool(examples=tuple(
        QAGenShot(rid, "s", "v", ()) for rid in ("a", "b", "c")))
    chosen = select_fewshot(pool, "a", 2, seed=0)
    assert {shot.reference_id for shot in chosen} == {"b", "c"}


def test_select_deterministic():
    pool = _pool()
    assert select_fewshot(pool, "ref0", 3, seed=42) == select_fewshot(pool, "ref0", 3, seed=42)


def test_select_zero():
    assert select_fewshot(_pool(), "ref0", 0, seed=1) == []


def test_select_insufficient_pool():
    with pytest.raises(InputError, match="eligible"):
        select_fewshot(_pool(), "ref0", 7, seed=1)


@given(st.integers(0, 2), st.integers(0, 10000))
@settings(max_examples=100, deadline=None)
def test_selection_never_contains_target(target, seed):
    chosen = select_fewshot(_pool(), f"ref{target}", 4, seed)
    assert all(shot.reference_id != f"ref{target}" for shot in chosen)


# ---------------------------------------------------------------------------
# backends

@pytest.fixture
def pegasus_gold(pegasus_example):
    reference, _, qas, _ = pegasus_example
    return GoldFileBackend(references=[reference], qas=qas)


def test_gold_backend_returns_stored_spans(pegasus_example, pegasus_gold):
    reference, *_ = pegasus_example
    sentence = reference.sentences[0].text
    spans = extract_predicates(sentence, pegasus_gold)
    assert [s.token_index for s in spans] == [1, 7, 12]


def test_gold_backend_replays_developed_qas(pegasus_example, pegasus_gold):
    reference, *_ = pegasus_example
    sentence = reference.sentences[3].text
    predicate = next(p for p in reference.predicates if p.surface == "developed")
    qas = pegasus_gold.generate(sentence, predicate)
    assert ("What developed something?", ["British firm"]) in qas
    assert ("What did something develop?", ["it"]) in qas


def test_lexicon_backend():
    backend = LexiconTaggerBackend(lexicon=frozenset({"ran"}))
    spans = extract_predicates("John ran home .", backend)
    assert [(s.token_index, s.surface) for s in spans] == [(1, "ran")]


def test_verb_free_sentence_yields_empty_list():
    backend = LexiconTaggerBackend(lexicon=frozenset({"ran", "ate", "developed"}))
    sentence = "Lewis Hamilton over half-a-second clear of team-mate Nico Rosberg ."
    assert extract_predicates(sentence, backend) == []


def test_empty_sentence_is_an_input_error():
    with pytest.raises(InputError):
        extract_predicates("  ", LexiconTaggerBackend(lexicon=frozenset({"x"})))


def test_remote_llm_generates_drafts():
    client, calls = scripted_client(["Question: Who ran? Answer: John"])
    backend = RemoteLLMBackend(client=client)
    predicate = PredicateSpan(0, 1, "ran")
    drafts = generate_qas("John ran home .", predicate, backend, example_id="ex9")
    assert len(drafts) == 1
    assert drafts[0].question == "Who ran?"
    assert drafts[0].answers == ("John",)
    assert drafts[0].status == "draft"
    assert calls[0]["temperature"] == 0
    assert calls[0]["model"] == "test-model"


def test_remote_llm_retries_once_on_parse_failure():
    client, calls = scripted_client(["gibberish", "Question: Who ran? Answer: John"])
    backend = RemoteLLMBackend(client=client)
    drafts = generate_qas("John ran home .", PredicateSpan(0, 1, "ran"), backend)
    assert len(drafts) == 1
    assert len(calls) == 2


def test_remote_llm_fails_after_second_bad_reply():
    client, _ = scripted_client(["gibberish", "still gibberish"])
    backend = RemoteLLMBackend(client=client)
    with pytest.raises(ParseError) as err:
        generate_qas("John ran home .", PredicateSpan(0, 1, "ran"), backend)
    assert err.value.raw == "still gibberish"


def test_remote_parser_backend():
    def handler(request):
        body = json.loads(request.content)
        assert body == {"sentence": "John ran home .", "predicate_index": 1}
        return httpx.Response(200, json=[{"question": "Who ran?", "answers": ["John"]}])
    client = JsonServiceClient("http://parser.test/qa",
                               transport=httpx.MockTransport(handler), backoff=0)
    backend = RemoteParserBackend(client=client)
    drafts = generate_qas("John ran home .", PredicateSpan(0, 1, "ran"), backend)
    assert drafts[0].question == "Who ran?"


def test_shots_require_a_pool():
    client, _ = scripted_client(["Question: Q? Answer: a"])
    backend = RemoteLLMBackend(client=client)
    with pytest.raises(InputError, match="pool"):
        generate_qas("John ran home .", PredicateSpan(0, 1, "ran"), backend, shots=3)


def test_invalid_shot_count():
    client, _ = scripted_client([])
    backend = RemoteLLMBackend(client=client)
    with pytest.raises(InputError, match="shots"):
        generate_qas("s", PredicateSpan(0, 0, "s"), backend, shots=2)


def test_gold_generate_qas_end_to_end(pegasus_example, pegasus_gold):
    reference, *_ = pegasus_example
    predicate = next(p for p in reference.predicates if p.surface == "developed")
    sentence = reference.sentences[3].text
    drafts = generate_qas(sentence, predicate, pegasus_gold,
                          example_id=reference.example_id)
    assert {(qa.question, qa.answers) for qa in drafts} >= {
        ("What developed something?", ("British firm",)),
        ("What did something develop?", ("it",))}


# ---------------------------------------------------------------------------
# prompt rendering

def test_zero_shot_prompt_matches_golden():
    sentence = ("Experts hail ' extraordinary achievement ' for British firm "
                "that developed it .")
    rendered = render_qa_generation_prompt(sentence, "developed")
    golden = (GOLDEN / "qa_generation_rendered.txt").read_text(encoding="utf-8")
    assert rendered == golden.rstrip("\n")


def test_zero_shot_prompt_has_no_example_blocks():
    rendered = render_qa_generation_prompt("John ran home .", "ran")
    assert rendered.count("[Sentence]") == 1
    assert rendered.count("Read the following sentence.") == 1


def test_few_shot_prompt_prepends_blocks():
    shots = [QAGenShot("r1", "Mary ate pie .", "ate",
                       (("Who ate?", ("Mary",)),))]
    rendered = render_qa_generation_prompt("John ran home .", "ran", shots)
    assert rendered.count("[Sentence]") == 2
    first, second = rendered.split("\n\n")
    assert "Mary ate pie ." in first
    assert "Question: Who ate? Answer: Mary" in first
    assert "John ran home ." in second


def test_fewshot_pool_round_trip(tmp_path, pegasus_example):
    reference, _, qas, _ = pegasus_example
    pool = FewShotPool.from_corpus([reference], qas)
    assert len(pool.examples) == 9
    path = tmp_path / "pool.jsonl"
    with path.open("w") as fh:
        for shot in pool.examples:
            fh.write(json.dumps({
                "reference_id": shot.reference_id, "sentence": shot.sentence,
                "verb": shot.verb,
                "qas": [{"question": q, "answers": list(a)} for q, a in shot.qas],
            }) + "\n")
    assert FewShotPool.load_qagen(path) == pool
