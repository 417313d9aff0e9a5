"""Command-line entry point.

Commands compose the library modules deterministically: all randomness is
seeded, outputs are sorted, and remote judgments are cached, so any
command run twice with the same inputs, seed, and warm cache produces
byte-identical output.  Exit codes: 0 ok, 2 input error, 3 backend error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import evalmetrics, metaeval, presence, qagen, scoring
from .corpus import load_dataset, record_to_dict
from .errors import BackendError, InputError
from .llmclient import (CACHE_DIR_VAR, DEFAULT_MAX_IN_FLIGHT,
                        ChatCompletionClient, JsonServiceClient,
                        config_from_env, run_bounded)


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except BackendError as exc:
            click.echo(f"backend error: {exc}", err=True)
            sys.exit(3)
    return wrapper


@click.group()
def main():
    """QA-based pyramid evaluation toolkit."""


POSITIVE_FLOAT = click.FloatRange(min=0, min_open=True)


def _write_or_echo(text: str, out: Path | None, name: str) -> None:
    if out is None:
        click.echo(text, nl=False)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# scoring

@main.command("score")
@click.option("--references", "references_path", required=True, type=click.Path(path_type=Path))
@click.option("--summaries", "summaries_path", required=True, type=click.Path(path_type=Path))
@click.option("--qas", "qas_path", required=True, type=click.Path(path_type=Path))
@click.option("--judgments", "judgments_path", required=True, type=click.Path(path_type=Path))
@click.option("--alpha", type=POSITIVE_FLOAT, default=scoring.DEFAULT_ALPHA,
              show_default=True, help="Length-penalty de-correlation constant.")
@click.option("--normalize/--no-normalize", default=True, show_default=True,
              help="Include penalty-normalized scores.")
@click.option("--min-span", type=click.IntRange(min=1), default=1, show_default=True,
              help="Smallest token span considered by repetition detection.")
@click.option("--count-first-occurrence/--no-count-first-occurrence", default=True,
              show_default=True,
              help="Count every copy in a repetition run, not just the repeats.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Directory for the table and per-summary records.")
@_exit_codes
def cmd_score(references_path, summaries_path, qas_path, judgments_path,
              alpha, normalize, min_span, count_first_occurrence, out):
    """Score system summaries against judged QA pairs."""
    references = load_dataset(references_path, "references")
    summaries = load_dataset(summaries_path, "summaries", references=references)
    qas = load_dataset(qas_path, "qas", references=references)
    judgments = load_dataset(judgments_path, "judgments", qas=qas, summaries=summaries)
    records, means = scoring.score_run(references, summaries, qas, judgments,
                                       alpha=alpha, normalize=normalize,
                                       min_span=min_span,
                                       count_first_occurrence=count_first_occurrence)
    table = scoring.render_system_table(means, normalize=normalize)
    if out is None:
        click.echo(table, nl=False)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / "system_scores.tsv").write_text(table, encoding="utf-8")
        scoring.write_score_records(records, out / "score_records.jsonl")


@main.command("calibrate-alpha")
@click.option("--records", "records_path", required=True, type=click.Path(path_type=Path),
              help="Score-record file carrying raw_score, effective_length, reference_length.")
@click.option("--grid", default="1:10", show_default=True,
              help="Alpha grid: 'lo:hi' integers or a comma-separated list.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_exit_codes
def cmd_calibrate_alpha(records_path, grid, out):
    """Pick the alpha whose length correlation is closest to zero."""
    triples = scoring.load_calibration_records(records_path)
    calibration = scoring.calibrate_alpha(triples, _parse_grid(grid))
    lines = ["alpha\tpearson_r"]
    for a, r in zip(calibration.grid, calibration.correlations):
        lines.append(f"{a:g}\t{r:.4f}")
    lines.append(f"chosen\t{calibration.chosen_alpha:g}")
    _write_or_echo("\n".join(lines) + "\n", out, "alpha_calibration.tsv")


def _parse_grid(spec: str) -> list[float]:
    try:
        if ":" in spec:
            lo, hi = spec.split(":", 1)
            return [float(a) for a in range(int(lo), int(hi) + 1)]
        return [float(a) for a in spec.split(",") if a.strip()]
    except ValueError as exc:
        raise InputError(f"bad grid spec {spec!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# backend construction

def _chat_client(model: str, prompt_dir) -> ChatCompletionClient:
    values = config_from_env(require=("endpoint", "api_key"))
    return ChatCompletionClient(endpoint=values["endpoint"], model=model,
                                api_key=values["api_key"])


def _qagen_backend(spec: str, references, prompt_dir):
    kind, _, arg = spec.partition(":")
    if kind == "gold":
        if not arg:
            raise InputError("gold backend needs a QA file: --backend gold:<qas.jsonl>")
        qas = load_dataset(arg, "qas", references=references)
        return qagen.GoldFileBackend(references=references, qas=qas)
    if kind == "lexicon":
        if arg.startswith("@"):
            words = Path(arg[1:]).read_text(encoding="utf-8").split()
        else:
            words = [w for w in arg.split(",") if w]
        if not words:
            raise InputError("lexicon backend needs words: --backend lexicon:ran,ate")
        return qagen.LexiconTaggerBackend(lexicon=frozenset(w.lower() for w in words))
    if kind == "llm":
        if not arg:
            raise InputError("llm backend needs a model name: --backend llm:<model>")
        return qagen.RemoteLLMBackend(client=_chat_client(arg, prompt_dir),
                                      prompt_dir=prompt_dir)
    if kind == "parser":
        if not arg:
            raise InputError("parser backend needs a URL: --backend parser:<url>")
        return qagen.RemoteParserBackend(client=JsonServiceClient(endpoint=arg))
    raise InputError(f"unknown QA generation backend {spec!r}")


def _presence_backend(spec: str, statement_mode: bool, prompt_dir):
    kind, _, arg = spec.partition(":")
    if kind == "lexical":
        return presence.LexicalBaselineBackend()
    if kind == "human":
        if not arg:
            raise InputError("human backend needs a judgments file: --backend human:<file>")
        judgments = load_dataset(arg, "judgments")
        return presence.HumanMajorityBackend(judgments=judgments)
    if kind == "llm":
        if not arg:
            raise InputError("llm backend needs a model name: --backend llm:<model>")
        client = _chat_client(arg, prompt_dir)
        if statement_mode:
            return presence.RemoteLLMStatementBackend(client=client, prompt_dir=prompt_dir)
        return presence.RemoteLLMPresenceBackend(client=client, prompt_dir=prompt_dir)
    raise InputError(f"unknown presence backend {spec!r}")


# ---------------------------------------------------------------------------
# automation commands

@main.command("gen-qa")
@click.option("--references", "references_path", required=True, type=click.Path(path_type=Path))
@click.option("--backend", "backend_spec", required=True,
              help="gold:<qas.jsonl> | lexicon:<w1,w2|@file> | llm:<model> | parser:<url>")
@click.option("--shots", type=click.Choice(["0", "1", "3", "5"]), default="0",
              show_default=True)
@click.option("--pool", "pool_path", type=click.Path(path_type=Path), default=None,
              help="Few-shot pool (JSONL of reference_id, sentence, verb, qas).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--prompt-dir", type=click.Path(path_type=Path), default=None,
              help="Override the packaged prompt templates.")
@click.option("--max-in-flight", type=click.IntRange(min=1),
              default=DEFAULT_MAX_IN_FLIGHT, show_default=True,
              help="Bound on concurrent backend requests.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_exit_codes
def cmd_gen_qa(references_path, backend_spec, shots, pool_path, seed, prompt_dir,
               max_in_flight, out):
    """Generate draft QA pairs for every predicate of every reference."""
    references = load_dataset(references_path, "references")
    backend = _qagen_backend(backend_spec, references, prompt_dir)
    pool = qagen.FewShotPool.load_qagen(pool_path) if pool_path else None
    shots = int(shots)

    work = []
    for ref in references:
        for span in sorted(ref.predicates, key=lambda p: (p.sentence_index, p.token_index)):
            work.append((ref, span))

    def _generate(item):
        ref, span = item
        sentence = ref.sentence(span.sentence_index)
        return qagen.generate_qas(sentence.text, span, backend, shots=shots,
                                  pool=pool, example_id=ref.example_id, seed=seed)

    produced = []
    empty_predicates = []
    for (ref, span), drafts, error in run_bounded(_generate, work, max_in_flight):
        if error is not None:
            raise error
        if not drafts:
            empty_predicates.append(f"{ref.example_id}|s{span.sentence_index}"
                                    f"|t{span.token_index}")
        produced.extend(drafts)

    text = "".join(json.dumps(record_to_dict(qa), ensure_ascii=False) + "\n"
                   for qa in produced)
    if out is None:
        click.echo(text, nl=False)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    if empty_predicates:
        click.echo(f"note: {len(empty_predicates)} predicates produced no QAs "
                   f"({', '.join(empty_predicates[:5])})", err=True)


@main.command("presence")
@click.option("--qas", "qas_path", required=True, type=click.Path(path_type=Path))
@click.option("--summaries", "summaries_path", required=True, type=click.Path(path_type=Path))
@click.option("--backend", "backend_spec", required=True,
              help="lexical | human:<judgments.jsonl> | llm:<model>")
@click.option("--shots", type=click.Choice(["0", "1", "3", "5"]), default="0",
              show_default=True)
@click.option("--statement-mode", is_flag=True,
              help="Convert each QA to a statement before asking.")
@click.option("--pool", "pool_path", type=click.Path(path_type=Path), default=None,
              help="Few-shot pool (JSONL of reference_id, summary, question, answer, label).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--cache-dir", type=click.Path(path_type=Path), default=None,
              help=f"Judgment cache directory (default ${CACHE_DIR_VAR}).")
@click.option("--prompt-dir", type=click.Path(path_type=Path), default=None)
@click.option("--max-in-flight", type=click.IntRange(min=1),
              default=DEFAULT_MAX_IN_FLIGHT, show_default=True,
              help="Bound on concurrent backend requests.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_exit_codes
def cmd_presence(qas_path, summaries_path, backend_spec, shots, statement_mode,
                 pool_path, seed, cache_dir, prompt_dir, max_in_flight, out):
    """Judge presence of every QA pair in every same-example summary."""
    qas = load_dataset(qas_path, "qas")
    summaries = load_dataset(summaries_path, "summaries")
    backend = _presence_backend(backend_spec, statement_mode, prompt_dir)
    pool = presence.load_presence_pool(pool_path) if pool_path else ()
    if cache_dir is None:
        env = config_from_env()
        cache_dir = env["cache_dir"]
    result = presence.batch_judge(summaries, qas, backend, shots=int(shots),
                                  pool=pool, seed=seed, cache_dir=cache_dir,
                                  max_in_flight=max_in_flight)
    text = "".join(json.dumps(record_to_dict(j), ensure_ascii=False) + "\n"
                   for j in result.judgments)
    if out is None:
        click.echo(text, nl=False)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        if result.failures:
            sidecar = Path(str(out) + ".failures.json")
            sidecar.write_text(json.dumps(result.failures, indent=2, ensure_ascii=False)
                               + "\n", encoding="utf-8")
    if result.failures:
        click.echo(f"note: {len(result.failures)} pairs failed", err=True)


# ---------------------------------------------------------------------------
# evaluation commands

def _qas_by_predicate(qas):
    grouped = {}
    for qa in qas:
        grouped.setdefault(qa.predicate_key(), []).append((qa.question, list(qa.answers)))
    return grouped


@main.command("eval-qagen")
@click.option("--generated", "generated_path", required=True, type=click.Path(path_type=Path))
@click.option("--gold", "gold_path", required=True, type=click.Path(path_type=Path))
@click.option("--ua-threshold", type=click.FloatRange(0, 1), default=0.5, show_default=True)
@click.option("--external", "external_specs", multiple=True,
              help="NAME=FILE of per-predicate scores computed elsewhere "
                   "(e.g. an embedding metric); repeatable.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_exit_codes
def cmd_eval_qagen(generated_path, gold_path, ua_threshold, external_specs, out):
    """Compare generated QA pairs against gold ones (ROUGE-L and UA)."""
    generated = load_dataset(generated_path, "qas")
    gold = load_dataset(gold_path, "qas")
    external = {}
    for spec in external_specs:
        name, _, path = spec.partition("=")
        if not path:
            raise InputError(f"--external expects NAME=FILE, got {spec!r}")
        external[name] = evalmetrics.load_external_pair_scores(path)
    report = evalmetrics.eval_qagen(_qas_by_predicate(generated),
                                    _qas_by_predicate(gold), ua_threshold,
                                    external=external or None)
    lines = ["metric\tvalue", f"rouge_l\t{report['rouge_l']:.1f}",
             f"ua\t{report['ua']:.1f}"]
    for name in sorted(external):
        lines.append(f"{name}\t{report[name]:.1f}")
    lines.append(f"predicates\t{report['predicates']}")
    _write_or_echo("\n".join(lines) + "\n", out, "qagen_eval.tsv")


@main.command("eval-presence")
@click.option("--predicted", "predicted_path", required=True, type=click.Path(path_type=Path))
@click.option("--gold", "gold_path", required=True, type=click.Path(path_type=Path))
@_exit_codes
def cmd_eval_presence(predicted_path, gold_path):
    """Micro-F1 of predicted presence labels against gold labels."""
    predicted = scoring.collapse_judgments(load_dataset(predicted_path, "judgments"))
    gold = scoring.collapse_judgments(load_dataset(gold_path, "judgments"))
    if set(predicted) != set(gold):
        missing = sorted(set(gold) - set(predicted))[:5]
        extra = sorted(set(predicted) - set(gold))[:5]
        raise InputError(f"pair sets differ; missing={missing} extra={extra}")
    keys = sorted(gold)
    score = evalmetrics.micro_f1([predicted[k] for k in keys], [gold[k] for k in keys])
    click.echo(f"micro_f1\t{100 * score:.1f}")


@main.command("meta-eval")
@click.option("--gold", "gold_path", required=True, type=click.Path(path_type=Path),
              help="Gold matrix: system_id<TAB>example_id<TAB>value lines.")
@click.option("--metric", "metric_specs", multiple=True, required=True,
              help="NAME=FILE; repeatable.")
@click.option("--groups", "groups_spec", default=None,
              help="e.g. 'FT=sys1,sys2;LLM=sys3,sys4' (an All group is added).")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_exit_codes
def cmd_meta_eval(gold_path, metric_specs, groups_spec, out):
    """Kendall correlations of metric matrices against a gold matrix."""
    gold = metaeval.MetricMatrix.from_file(gold_path, "gold")
    metrics = []
    for spec in metric_specs:
        name, _, path = spec.partition("=")
        if not path:
            raise InputError(f"--metric expects NAME=FILE, got {spec!r}")
        metrics.append(metaeval.MetricMatrix.from_file(path, name))
    if groups_spec:
        groups = _parse_groups(groups_spec, gold)
    else:
        groups = [metaeval.SystemGroup("All", gold.systems)]
    report = metaeval.correlation_report(metrics, gold, groups)
    _write_or_echo(report.render(), out, "correlations.tsv")


def _parse_groups(spec: str, gold: metaeval.MetricMatrix) -> list[metaeval.SystemGroup]:
    named = {}
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, members = part.partition("=")
        if not members:
            raise InputError(f"bad group spec {part!r}")
        named[name.strip()] = tuple(m.strip() for m in members.split(",") if m.strip())
    groups = [metaeval.SystemGroup(name, systems) for name, systems in named.items()]
    if set(named) == {"FT", "LLM"}:
        return metaeval.standard_groups(named["FT"], named["LLM"])
    covered = {s for g in groups for s in g.systems}
    if covered != set(gold.systems):
        groups.append(metaeval.SystemGroup("All", gold.systems))
    return groups


# ---------------------------------------------------------------------------
# service

@main.command("serve")
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--db", "db_path", type=click.Path(path_type=Path), required=True,
              help="Path of the embedded store (created if absent).")
@_exit_codes
def cmd_serve(port, host, db_path):
    """Run the annotation workflow service."""
    import uvicorn

    from .annotate import AnnotationService, create_app

    service = AnnotationService(db_path)
    app = create_app(service)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
