"""Core annotation workflow logic over an embedded sqlite store.

All state transitions run inside one serialized transaction (a process
lock plus sqlite), so concurrent polling never double-assigns a task and
aggregation triggers are idempotent.  Task and QA ids are derived from
content, which makes project imports idempotent and exports byte-stable.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
import time
from pathlib import Path
from typing import Sequence

from .. import metaeval, qagen
from ..corpus import (PredicateSpan, PresenceJudgment, QAPair, ReferenceSummary,
                      SystemSummary, record_from_dict, record_to_dict,
                      validate_collection)
from ..errors import InputError
from ..presence import majority_vote

KINDS = ("qa_write", "qa_verify", "presence")
REQUIRED_ASSIGNMENTS = {"qa_write": 1, "qa_verify": 2, "presence": 3}

# HIT payment figures are display metadata only; no payment processing here
DEFAULT_CONFIG = {
    "max_requeues": 2,
    "min_signal": 20,
    "strict_qa_validation": False,
    "writer_ok_threshold": 0.85,
    "verifier_agreement_threshold": 0.85,
    "presence_qualification_threshold": 0.90,
    "payment_display": {"qa_write": "$0.32", "qa_verify": "$0.17", "presence": "$0.20"},
    "instructions": {},
    "qualification": {},
}


def aggregate_verification(duplicate_flag: bool, verdicts: Sequence[bool]) -> str:
    """Final QA status from exactly two verifier verdicts.

    Valid only when both verifiers accept; a duplicate flag survives
    acceptance so flagged QAs stay out of the scored set.
    """
    if len(verdicts) != 2:
        raise InputError(f"verification needs exactly 2 verdicts, got {len(verdicts)}")
    if not all(verdicts):
        return "invalid"
    return "duplicate" if duplicate_flag else "valid"


def _task_id(content_key: str) -> str:
    return "t-" + hashlib.sha256(content_key.encode("utf-8")).hexdigest()[:16]


def _qa_row_id(parts: Sequence) -> str:
    material = json.dumps(list(parts), ensure_ascii=False)
    return "qa-" + hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


class AnnotationService:
    """Single-process annotation backend; safe under concurrent requests."""

    def __init__(self, db_path: str | Path = ":memory:"):
        self._lock = threading.RLock()
        # autocommit mode; transactions are opened explicitly with BEGIN IMMEDIATE
        self._conn = sqlite3.connect(str(db_path), check_same_thread=False,
                                     isolation_level=None)
        self._conn.execute("PRAGMA foreign_keys = ON")
        self._init_schema()

    def _init_schema(self) -> None:
        with self._lock:
            self._conn.executescript("""
            CREATE TABLE IF NOT EXISTS projects(
                project_id TEXT PRIMARY KEY,
                config TEXT NOT NULL);
            CREATE TABLE IF NOT EXISTS refs(
                project_id TEXT, example_id TEXT, record TEXT,
                PRIMARY KEY(project_id, example_id));
            CREATE TABLE IF NOT EXISTS summaries(
                project_id TEXT, system_id TEXT, example_id TEXT, record TEXT,
                PRIMARY KEY(project_id, system_id, example_id));
            CREATE TABLE IF NOT EXISTS tasks(
                task_id TEXT PRIMARY KEY,
                project_id TEXT NOT NULL,
                kind TEXT NOT NULL,
                payload TEXT NOT NULL,
                required INTEGER NOT NULL,
                state TEXT NOT NULL DEFAULT 'open',
                is_qualification INTEGER NOT NULL DEFAULT 0,
                gold TEXT,
                content_key TEXT UNIQUE,
                attempt INTEGER NOT NULL DEFAULT 0,
                origin TEXT NOT NULL DEFAULT '[]');
            CREATE TABLE IF NOT EXISTS assignments(
                task_id TEXT, worker_id TEXT, assigned_at REAL,
                PRIMARY KEY(task_id, worker_id));
            CREATE TABLE IF NOT EXISTS submissions(
                sub_id INTEGER PRIMARY KEY AUTOINCREMENT,
                task_id TEXT, worker_id TEXT, payload TEXT, ts REAL,
                UNIQUE(task_id, worker_id));
            CREATE TABLE IF NOT EXISTS qas(
                qa_id TEXT PRIMARY KEY,
                project_id TEXT, example_id TEXT, sentence_index INTEGER,
                predicate TEXT, question TEXT, answers TEXT,
                status TEXT NOT NULL DEFAULT 'draft',
                writer TEXT, duplicate_flag INTEGER NOT NULL DEFAULT 0,
                attempt INTEGER NOT NULL DEFAULT 0);
            CREATE TABLE IF NOT EXISTS judgments(
                project_id TEXT, qa_id TEXT, system_id TEXT,
                label TEXT, source TEXT,
                PRIMARY KEY(project_id, qa_id, system_id, source));
            CREATE TABLE IF NOT EXISTS workers(
                worker_id TEXT PRIMARY KEY,
                quals TEXT NOT NULL DEFAULT '[]');
            CREATE TABLE IF NOT EXISTS flags(
                project_id TEXT, kind TEXT, ref TEXT, note TEXT,
                PRIMARY KEY(project_id, kind, ref));
            """)
            self._conn.commit()

    # ------------------------------------------------------------------
    # small helpers

    def _config(self, project_id: str) -> dict:
        row = self._conn.execute(
            "SELECT config FROM projects WHERE project_id = ?", (project_id,)).fetchone()
        if row is None:
            raise InputError(f"unknown project {project_id!r}")
        return json.loads(row[0])

    def _worker_quals(self, worker_id: str) -> set[str]:
        row = self._conn.execute(
            "SELECT quals FROM workers WHERE worker_id = ?", (worker_id,)).fetchone()
        return set(json.loads(row[0])) if row else set()

    def _set_worker_quals(self, worker_id: str, quals: set[str]) -> None:
        self._conn.execute(
            "INSERT INTO workers(worker_id, quals) VALUES(?, ?) "
            "ON CONFLICT(worker_id) DO UPDATE SET quals = excluded.quals",
            (worker_id, json.dumps(sorted(quals))))

    def _submission_count(self, task_id: str) -> int:
        return self._conn.execute(
            "SELECT COUNT(*) FROM submissions WHERE task_id = ?", (task_id,)).fetchone()[0]

    def _flag(self, project_id: str, kind: str, ref: str, note: str) -> None:
        self._conn.execute(
            "INSERT OR IGNORE INTO flags(project_id, kind, ref, note) VALUES(?,?,?,?)",
            (project_id, kind, ref, note))

    def _insert_task(self, project_id: str, kind: str, payload: dict, required: int,
                     content_key: str, attempt: int = 0,
                     origin: Sequence[str] = (), is_qualification: bool = False,
                     gold: dict | None = None) -> str | None:
        task_id = _task_id(content_key)
        cur = self._conn.execute(
            "INSERT OR IGNORE INTO tasks(task_id, project_id, kind, payload, required, "
            "state, is_qualification, gold, content_key, attempt, origin) "
            "VALUES(?,?,?,?,?,'open',?,?,?,?,?)",
            (task_id, project_id, kind, json.dumps(payload, ensure_ascii=False), required,
             int(is_qualification), json.dumps(gold, ensure_ascii=False) if gold else None,
             content_key, attempt, json.dumps(sorted(set(origin)))))
        return task_id if cur.rowcount else None

    # ------------------------------------------------------------------
    # project creation

    def create_project(self, project_id: str, references: Sequence[ReferenceSummary],
                       summaries: Sequence[SystemSummary] = (),
                       config: dict | None = None) -> dict:
        """Create or extend a project; importing the same corpus twice is a no-op.

        One QA-writing task is generated per predicate; sentences without
        any predicate are flagged for manual QA authoring.  Presence tasks
        appear later, once a predicate's QAs are verified.
        """
        if not references:
            raise InputError("cannot create a project from an empty corpus")
        validate_collection(list(references), "references")
        validate_collection(list(summaries), "summaries", references=list(references))
        merged = dict(DEFAULT_CONFIG)
        merged.update(config or {})
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                self._conn.execute(
                    "INSERT OR IGNORE INTO projects(project_id, config) VALUES(?, ?)",
                    (project_id, json.dumps(merged, ensure_ascii=False)))
                for ref in references:
                    self._conn.execute(
                        "INSERT OR IGNORE INTO refs(project_id, example_id, record) "
                        "VALUES(?,?,?)",
                        (project_id, ref.example_id,
                         json.dumps(record_to_dict(ref), ensure_ascii=False)))
                for summary in summaries:
                    self._conn.execute(
                        "INSERT OR IGNORE INTO summaries(project_id, system_id, example_id, "
                        "record) VALUES(?,?,?,?)",
                        (project_id, summary.system_id, summary.example_id,
                         json.dumps(record_to_dict(summary), ensure_ascii=False)))

                created = 0
                for ref in references:
                    by_sentence: dict[int, list[PredicateSpan]] = {
                        s.sentence_index: [] for s in ref.sentences}
                    for p in ref.predicates:
                        by_sentence[p.sentence_index].append(p)
                    for sentence in ref.sentences:
                        spans = by_sentence[sentence.sentence_index]
                        if not spans:
                            self._flag(project_id, "manual_qa",
                                       f"{ref.example_id}|s{sentence.sentence_index}",
                                       "sentence lacks predicates; author QA pairs manually")
                            continue
                        for span in spans:
                            payload = {
                                "example_id": ref.example_id,
                                "sentence_index": sentence.sentence_index,
                                "sentence": sentence.text,
                                "predicate": record_to_dict_predicate(span),
                            }
                            key = (f"{project_id}|qa_write|{ref.example_id}"
                                   f"|s{sentence.sentence_index}|t{span.token_index}|a0")
                            if self._insert_task(project_id, "qa_write", payload,
                                                 REQUIRED_ASSIGNMENTS["qa_write"], key):
                                created += 1

                for kind, tasks in (merged.get("qualification") or {}).items():
                    if kind not in KINDS:
                        raise InputError(f"unknown qualification kind {kind!r}")
                    for index, entry in enumerate(tasks):
                        key = f"{project_id}|qual|{kind}|{index}"
                        self._insert_task(project_id, kind, entry["payload"], 0, key,
                                          is_qualification=True, gold=entry.get("gold"))

                # summaries may arrive after predicates were finalized
                for ref in references:
                    for span in ref.predicates:
                        self._maybe_create_presence_tasks(
                            project_id, ref.example_id, span.sentence_index,
                            span.token_index)
                self._conn.commit()
            except BaseException:
                self._conn.rollback()
                raise
            return {"project_id": project_id, "qa_write_tasks_created": created}

    def list_projects(self) -> list[dict]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT project_id, config FROM projects ORDER BY project_id").fetchall()
            out = []
            for project_id, _ in rows:
                counts = dict(self._conn.execute(
                    "SELECT kind, COUNT(*) FROM tasks WHERE project_id = ? AND "
                    "is_qualification = 0 GROUP BY kind", (project_id,)).fetchall())
                open_count = self._conn.execute(
                    "SELECT COUNT(*) FROM tasks WHERE project_id = ? AND "
                    "is_qualification = 0 AND state = 'open'", (project_id,)).fetchone()[0]
                out.append({"project_id": project_id, "tasks": counts,
                            "open_tasks": open_count})
            return out

    # ------------------------------------------------------------------
    # assignment

    def next_task(self, worker_id: str, kind: str) -> dict | None:
        """Atomically assign an open task the worker has not touched.

        Unqualified workers only receive the project's qualification tasks;
        nobody receives a task derived from their own earlier submission.
        """
        if kind not in KINDS:
            raise InputError(f"unknown task kind {kind!r}")
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                self._set_worker_quals(worker_id, self._worker_quals(worker_id))
                quals = self._worker_quals(worker_id)
                if kind not in quals:
                    task = self._next_qualification_task(worker_id, kind)
                else:
                    task = self._next_regular_task(worker_id, kind)
                if task is not None:
                    self._conn.execute(
                        "INSERT INTO assignments(task_id, worker_id, assigned_at) "
                        "VALUES(?,?,?)", (task["task_id"], worker_id, time.time()))
                self._conn.commit()
                return task
            except BaseException:
                self._conn.rollback()
                raise

    def _next_qualification_task(self, worker_id: str, kind: str) -> dict | None:
        rows = self._conn.execute(
            "SELECT task_id, project_id, kind, payload, required, attempt FROM tasks "
            "WHERE kind = ? AND is_qualification = 1 ORDER BY rowid", (kind,)).fetchall()
        for row in rows:
            touched = self._conn.execute(
                "SELECT 1 FROM assignments WHERE task_id = ? AND worker_id = ?",
                (row[0], worker_id)).fetchone()
            if not touched:
                return self._task_view(row, qualification=True)
        return None

    def _next_regular_task(self, worker_id: str, kind: str) -> dict | None:
        rows = self._conn.execute(
            "SELECT task_id, project_id, kind, payload, required, attempt, origin "
            "FROM tasks WHERE kind = ? AND is_qualification = 0 AND state = 'open' "
            "ORDER BY rowid", (kind,)).fetchall()
        for row in rows:
            task_id, _, _, _, required, _, origin = row
            if worker_id in json.loads(origin):
                continue
            touched = self._conn.execute(
                "SELECT 1 FROM assignments WHERE task_id = ? AND worker_id = ?",
                (task_id, worker_id)).fetchone()
            if touched:
                continue
            active = self._conn.execute(
                "SELECT COUNT(*) FROM assignments WHERE task_id = ?", (task_id,)).fetchone()[0]
            if active >= required:
                continue
            return self._task_view(row[:6])
        return None

    def _task_view(self, row, qualification: bool = False) -> dict:
        task_id, project_id, kind, payload, required, attempt = row
        return {"task_id": task_id, "project_id": project_id, "kind": kind,
                "payload": json.loads(payload), "required_assignments": required,
                "attempt": attempt, "qualification": qualification}

    def get_task(self, task_id: str) -> dict:
        with self._lock:
            row = self._conn.execute(
                "SELECT task_id, project_id, kind, payload, required, attempt, "
                "is_qualification, state FROM tasks WHERE task_id = ?",
                (task_id,)).fetchone()
            if row is None:
                raise InputError(f"unknown task {task_id!r}")
            view = self._task_view(row[:6], qualification=bool(row[6]))
            view["state"] = row[7]
            return view

    # ------------------------------------------------------------------
    # submission

    def submit(self, task_id: str, worker_id: str, payload: dict) -> dict:
        """Record one submission; aggregation fires when the task fills up.

        Submitting the identical payload twice is treated as an idempotent
        replay; a different payload for the same (task, worker) is an error.
        """
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                row = self._conn.execute(
                    "SELECT project_id, kind, payload, required, state, is_qualification, "
                    "gold, attempt, origin FROM tasks WHERE task_id = ?",
                    (task_id,)).fetchone()
                if row is None:
                    raise InputError(f"unknown task {task_id!r}")
                (project_id, kind, task_payload, required, state,
                 is_qualification, gold, attempt, origin) = row
                assigned = self._conn.execute(
                    "SELECT 1 FROM assignments WHERE task_id = ? AND worker_id = ?",
                    (task_id, worker_id)).fetchone()
                if not assigned:
                    raise InputError(f"task {task_id!r} is not assigned to {worker_id!r}")
                prior = self._conn.execute(
                    "SELECT payload FROM submissions WHERE task_id = ? AND worker_id = ?",
                    (task_id, worker_id)).fetchone()
                if prior is not None:
                    if json.loads(prior[0]) == payload:
                        self._conn.commit()
                        return {"accepted": True, "replay": True}
                    raise InputError(f"{worker_id!r} already submitted task {task_id!r}")
                if state == "complete" and not is_qualification:
                    raise InputError(f"task {task_id!r} is already complete")

                task_data = json.loads(task_payload)
                self._validate_payload(project_id, kind, task_data, payload)
                self._conn.execute(
                    "INSERT INTO submissions(task_id, worker_id, payload, ts) "
                    "VALUES(?,?,?,?)",
                    (task_id, worker_id, json.dumps(payload, ensure_ascii=False),
                     time.time()))

                if is_qualification:
                    self._grade_qualification(worker_id, kind)
                elif self._submission_count(task_id) >= required:
                    self._conn.execute(
                        "UPDATE tasks SET state = 'complete' WHERE task_id = ?", (task_id,))
                    self._finalize_task(project_id, task_id, kind, task_data,
                                        attempt, origin)
                self._conn.commit()
                return {"accepted": True, "replay": False}
            except BaseException:
                self._conn.rollback()
                raise

    def _validate_payload(self, project_id: str, kind: str, task_data: dict,
                          payload: dict) -> None:
        config = self._config(project_id)
        if kind == "qa_write":
            entries = payload.get("qas")
            if not isinstance(entries, list):
                raise InputError("qa_write payload must carry a 'qas' list")
            drafts = self._drafts_from_payload(task_data, entries, attempt=0)
            result = qagen.validate_qa(drafts, task_data["sentence"],
                                       strict=bool(config.get("strict_qa_validation")))
            if not result.batch_ok:
                raise InputError("; ".join(result.batch_reasons))
            bad = [v for v in result.verdicts if not v.ok]
            if bad:
                raise InputError("; ".join(bad[0].reasons))
        elif kind == "qa_verify":
            if not isinstance(payload.get("valid"), bool):
                raise InputError("qa_verify payload must carry a boolean 'valid'")
            if payload["valid"] and not str(payload.get("answer", "")).strip():
                raise InputError("a valid verdict must include the verifier's answer")
        elif kind == "presence":
            labels = payload.get("labels")
            if not isinstance(labels, dict):
                raise InputError("presence payload must carry a 'labels' object")
            expected = {qa["qa_id"] for qa in task_data["qas"]}
            if set(labels) != expected:
                raise InputError("labels must cover exactly the task's QA pairs")
            for qa_id, label in labels.items():
                if label not in ("present", "not_present"):
                    raise InputError(f"bad label {label!r} for {qa_id!r}")

    def _drafts_from_payload(self, task_data: dict, entries: list,
                             attempt: int) -> list[QAPair]:
        predicate = PredicateSpan(**task_data["predicate"])
        drafts = []
        for index, entry in enumerate(entries):
            try:
                question = str(entry["question"])
                answers = tuple(str(a) for a in entry["answers"])
            except (KeyError, TypeError) as exc:
                raise InputError(f"malformed QA entry #{index}: {exc}") from exc
            qa_id = _qa_row_id([task_data["example_id"], task_data["sentence_index"],
                                predicate.token_index, attempt, index, question,
                                list(answers)])
            drafts.append(QAPair(qa_id=qa_id, example_id=task_data["example_id"],
                                 sentence_index=task_data["sentence_index"],
                                 predicate=predicate, question=question,
                                 answers=answers, status="draft"))
        return drafts

    # ------------------------------------------------------------------
    # aggregation triggers

    def _finalize_task(self, project_id: str, task_id: str, kind: str,
                       task_data: dict, attempt: int, origin: str) -> None:
        if kind == "qa_write":
            self._finalize_qa_write(project_id, task_id, task_data, attempt)
        elif kind == "qa_verify":
            self._finalize_qa_verify(project_id, task_id, task_data)
        elif kind == "presence":
            self._finalize_presence(project_id, task_id, task_data)

    def _finalize_qa_write(self, project_id: str, task_id: str, task_data: dict,
                           attempt: int) -> None:
        sub = self._conn.execute(
            "SELECT worker_id, payload FROM submissions WHERE task_id = ?",
            (task_id,)).fetchone()
        writer, payload = sub[0], json.loads(sub[1])
        drafts = self._drafts_from_payload(task_data, payload["qas"], attempt)

        # dedup against earlier attempts of the same predicate as context
        predicate = PredicateSpan(**task_data["predicate"])
        earlier = self._predicate_qas(project_id, task_data["example_id"],
                                      task_data["sentence_index"], predicate.token_index)
        seen = {qagen.dedup_key(qa) for qa in earlier}
        flags = []
        for qa in drafts:
            key = qagen.dedup_key(qa)
            flags.append(key in seen)
            seen.add(key)

        for qa, duplicate in zip(drafts, flags):
            self._conn.execute(
                "INSERT INTO qas(qa_id, project_id, example_id, sentence_index, predicate, "
                "question, answers, status, writer, duplicate_flag, attempt) "
                "VALUES(?,?,?,?,?,?,?,?,?,?,?)",
                (qa.qa_id, project_id, qa.example_id, qa.sentence_index,
                 json.dumps(record_to_dict_predicate(qa.predicate)), qa.question,
                 json.dumps(list(qa.answers), ensure_ascii=False), "draft", writer,
                 int(duplicate), attempt))
            verify_payload = {
                "example_id": qa.example_id,
                "sentence_index": qa.sentence_index,
                "sentence": task_data["sentence"],
                "predicate": record_to_dict_predicate(qa.predicate),
                "qa": {"qa_id": qa.qa_id, "question": qa.question,
                       "answers": list(qa.answers)},
                "duplicate_flag": duplicate,
            }
            self._insert_task(project_id, "qa_verify", verify_payload,
                              REQUIRED_ASSIGNMENTS["qa_verify"],
                              f"{project_id}|qa_verify|{qa.qa_id}",
                              attempt=attempt, origin=[writer])
        if not drafts:
            # an empty batch finalizes the predicate immediately
            self._after_verification(project_id, task_data["example_id"],
                                     task_data["sentence_index"], predicate.token_index)

    def _finalize_qa_verify(self, project_id: str, task_id: str, task_data: dict) -> None:
        subs = self._conn.execute(
            "SELECT payload FROM submissions WHERE task_id = ? ORDER BY sub_id",
            (task_id,)).fetchall()
        verdicts = [bool(json.loads(s[0])["valid"]) for s in subs]
        marked_duplicate = any(bool(json.loads(s[0]).get("duplicate")) for s in subs)
        qa_id = task_data["qa"]["qa_id"]
        duplicate_flag = bool(task_data.get("duplicate_flag")) or marked_duplicate
        status = aggregate_verification(duplicate_flag, verdicts)
        self._conn.execute("UPDATE qas SET status = ? WHERE qa_id = ?", (status, qa_id))
        predicate = task_data["predicate"]
        self._after_verification(project_id, task_data["example_id"],
                                 task_data["sentence_index"], predicate["token_index"])

    def _finalize_presence(self, project_id: str, task_id: str, task_data: dict) -> None:
        subs = self._conn.execute(
            "SELECT payload FROM submissions WHERE task_id = ? ORDER BY sub_id",
            (task_id,)).fetchall()
        labels_by_qa: dict[str, list[str]] = {}
        for (payload,) in subs:
            for qa_id, label in json.loads(payload)["labels"].items():
                labels_by_qa.setdefault(qa_id, []).append(label)
        for qa_id, labels in labels_by_qa.items():
            final = majority_vote(labels)
            self._conn.execute(
                "INSERT OR REPLACE INTO judgments(project_id, qa_id, system_id, label, "
                "source) VALUES(?,?,?,?,?)",
                (project_id, qa_id, task_data["system_id"], final, "majority"))

    # ------------------------------------------------------------------
    # predicate lifecycle

    def _predicate_qas(self, project_id: str, example_id: str, sentence_index: int,
                       token_index: int) -> list[QAPair]:
        rows = self._conn.execute(
            "SELECT qa_id, example_id, sentence_index, predicate, question, answers, "
            "status FROM qas WHERE project_id = ? AND example_id = ? AND "
            "sentence_index = ? ORDER BY rowid",
            (project_id, example_id, sentence_index)).fetchall()
        out = []
        for qa_id, ex, si, predicate, question, answers, status in rows:
            span = PredicateSpan(**json.loads(predicate))
            if span.token_index != token_index:
                continue
            out.append(QAPair(qa_id=qa_id, example_id=ex, sentence_index=si,
                              predicate=span, question=question,
                              answers=tuple(json.loads(answers)), status=status))
        return out

    def _predicate_open_tasks(self, project_id: str, example_id: str,
                              sentence_index: int, token_index: int) -> int:
        count = 0
        rows = self._conn.execute(
            "SELECT payload, kind FROM tasks WHERE project_id = ? AND state = 'open' "
            "AND is_qualification = 0 AND kind IN ('qa_write', 'qa_verify')",
            (project_id,)).fetchall()
        for payload, kind in rows:
            data = json.loads(payload)
            if (data.get("example_id") == example_id
                    and data.get("sentence_index") == sentence_index
                    and data.get("predicate", {}).get("token_index") == token_index):
                count += 1
        return count

    def _after_verification(self, project_id: str, example_id: str,
                            sentence_index: int, token_index: int) -> None:
        """Requeue sparse predicates or open presence judging when done."""
        if self._predicate_open_tasks(project_id, example_id, sentence_index,
                                      token_index):
            return
        qas = self._predicate_qas(project_id, example_id, sentence_index, token_index)
        valid = [qa for qa in qas if qa.status == "valid"]
        if len(valid) >= 2:
            self._maybe_create_presence_tasks(project_id, example_id, sentence_index,
                                              token_index)
            return
        config = self._config(project_id)
        write_tasks = [
            (row[0], row[1]) for row in self._conn.execute(
                "SELECT task_id, attempt, payload FROM tasks WHERE project_id = ? AND "
                "kind = 'qa_write' AND is_qualification = 0", (project_id,)).fetchall()
            if self._matches_predicate(row[2], example_id, sentence_index, token_index)]
        last_attempt = max((a for _, a in write_tasks), default=0)
        if last_attempt >= int(config.get("max_requeues", 2)):
            self._flag(project_id, "manual_qa",
                       f"{example_id}|s{sentence_index}|t{token_index}",
                       "requeue budget exhausted with fewer than 2 valid QA pairs")
            return
        ref_row = self._conn.execute(
            "SELECT record FROM refs WHERE project_id = ? AND example_id = ?",
            (project_id, example_id)).fetchone()
        ref = record_from_dict("references", json.loads(ref_row[0]), "db")
        sentence = ref.sentence(sentence_index)
        span = next(p for p in ref.predicates
                    if p.sentence_index == sentence_index and p.token_index == token_index)
        writers = set()
        for task_id, _ in write_tasks:
            for (w,) in self._conn.execute(
                    "SELECT worker_id FROM submissions WHERE task_id = ?",
                    (task_id,)).fetchall():
                writers.add(w)
        payload = {"example_id": example_id, "sentence_index": sentence_index,
                   "sentence": sentence.text,
                   "predicate": record_to_dict_predicate(span)}
        self._insert_task(project_id, "qa_write", payload,
                          REQUIRED_ASSIGNMENTS["qa_write"],
                          f"{project_id}|qa_write|{example_id}|s{sentence_index}"
                          f"|t{token_index}|a{last_attempt + 1}",
                          attempt=last_attempt + 1, origin=writers)

    @staticmethod
    def _matches_predicate(payload: str, example_id: str, sentence_index: int,
                           token_index: int) -> bool:
        data = json.loads(payload)
        return (data.get("example_id") == example_id
                and data.get("sentence_index") == sentence_index
                and data.get("predicate", {}).get("token_index") == token_index)

    def _maybe_create_presence_tasks(self, project_id: str, example_id: str,
                                     sentence_index: int, token_index: int) -> None:
        if self._predicate_open_tasks(project_id, example_id, sentence_index,
                                      token_index):
            return
        valid = [qa for qa in self._predicate_qas(project_id, example_id,
                                                  sentence_index, token_index)
                 if qa.status == "valid"]
        if len(valid) < 2:
            return
        ref_row = self._conn.execute(
            "SELECT record FROM refs WHERE project_id = ? AND example_id = ?",
            (project_id, example_id)).fetchone()
        reference_text = json.loads(ref_row[0])["text"] if ref_row else ""
        rows = self._conn.execute(
            "SELECT system_id, record FROM summaries WHERE project_id = ? AND "
            "example_id = ? ORDER BY system_id", (project_id, example_id)).fetchall()
        for system_id, record in rows:
            payload = {
                "example_id": example_id,
                "sentence_index": sentence_index,
                "system_id": system_id,
                "reference_text": reference_text,
                "summary_text": json.loads(record)["text"],
                "predicate": record_to_dict_predicate(valid[0].predicate),
                "qas": [{"qa_id": qa.qa_id, "question": qa.question,
                         "answers": list(qa.answers)} for qa in valid],
            }
            self._insert_task(project_id, "presence", payload,
                              REQUIRED_ASSIGNMENTS["presence"],
                              f"{project_id}|presence|{example_id}|s{sentence_index}"
                              f"|t{token_index}|{system_id}")

    def requeue_sparse_predicates(self, project_id: str) -> list[str]:
        """Scan all predicates and requeue the sparse ones; returns new task ids."""
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                before = {row[0] for row in self._conn.execute(
                    "SELECT task_id FROM tasks WHERE project_id = ? AND kind = 'qa_write'",
                    (project_id,)).fetchall()}
                for ref in self._project_references(project_id):
                    for span in ref.predicates:
                        self._after_verification(project_id, ref.example_id,
                                                 span.sentence_index, span.token_index)
                after = {row[0] for row in self._conn.execute(
                    "SELECT task_id FROM tasks WHERE project_id = ? AND kind = 'qa_write'",
                    (project_id,)).fetchall()}
                self._conn.commit()
                return sorted(after - before)
            except BaseException:
                self._conn.rollback()
                raise

    def _project_references(self, project_id: str) -> list[ReferenceSummary]:
        rows = self._conn.execute(
            "SELECT record FROM refs WHERE project_id = ? ORDER BY example_id",
            (project_id,)).fetchall()
        return [record_from_dict("references", json.loads(r[0]), "db") for r in rows]

    # ------------------------------------------------------------------
    # qualification

    def _grade_qualification(self, worker_id: str, kind: str) -> None:
        tasks = self._conn.execute(
            "SELECT task_id, gold, project_id FROM tasks WHERE kind = ? AND "
            "is_qualification = 1 ORDER BY rowid", (kind,)).fetchall()
        if not tasks:
            return
        graded = []
        for task_id, gold, _ in tasks:
            sub = self._conn.execute(
                "SELECT payload FROM submissions WHERE task_id = ? AND worker_id = ?",
                (task_id, worker_id)).fetchone()
            if sub is None:
                return  # not done yet
            graded.append(self._grade_one(kind, json.loads(gold) if gold else None,
                                          json.loads(sub[0])))
        accuracy = sum(graded) / len(graded)
        config = self._config(tasks[0][2])
        if kind == "presence":
            # "more than 90% accuracy" over the gold tasks
            passed = accuracy > float(config["presence_qualification_threshold"])
        else:
            # writers and verifiers must get every gold task right
            passed = accuracy >= 1.0
        if passed:
            quals = self._worker_quals(worker_id)
            quals.add(kind)
            self._set_worker_quals(worker_id, quals)

    @staticmethod
    def _grade_one(kind: str, gold: dict | None, payload: dict) -> bool:
        if gold is None:
            return True
        if kind == "qa_write":
            def keys(entries):
                out = set()
                for e in entries:
                    qa = QAPair(qa_id="g", example_id="g", sentence_index=0,
                                predicate=PredicateSpan(0, 0, "g"),
                                question=str(e["question"]),
                                answers=tuple(str(a) for a in e["answers"]))
                    out.add(qagen.dedup_key(qa))
                return out
            return keys(payload.get("qas", [])) == keys(gold.get("qas", []))
        if kind == "qa_verify":
            return bool(payload.get("valid")) == bool(gold.get("valid"))
        if kind == "presence":
            return payload.get("labels") == gold.get("labels")
        return False

    def qualify(self, worker_id: str, kind: str, qualified: bool) -> dict:
        """Administrative qualification override."""
        if kind not in KINDS:
            raise InputError(f"unknown task kind {kind!r}")
        with self._lock:
            quals = self._worker_quals(worker_id)
            if qualified:
                quals.add(kind)
            else:
                quals.discard(kind)
            self._set_worker_quals(worker_id, quals)
            self._conn.commit()
            return {"worker_id": worker_id, "qualifications": sorted(quals)}

    def worker_stats(self, project_id: str) -> dict[str, dict]:
        """Per-worker counters: submissions by kind, writer validity rate,
        verifier peer-agreement rate."""
        self._config(project_id)
        with self._lock:
            stats: dict[str, dict] = {}

            def entry(worker: str) -> dict:
                return stats.setdefault(worker, {
                    "submitted": {}, "validated_ok": None,
                    "peer_agreement_rate": None})

            for worker, kind, count in self._conn.execute(
                    "SELECT s.worker_id, t.kind, COUNT(*) FROM submissions s JOIN "
                    "tasks t ON s.task_id = t.task_id WHERE t.project_id = ? "
                    "GROUP BY s.worker_id, t.kind", (project_id,)).fetchall():
                entry(worker)["submitted"][kind] = count

            writer_counts: dict[str, list[int]] = {}
            for writer, status in self._conn.execute(
                    "SELECT writer, status FROM qas WHERE project_id = ? AND "
                    "status IN ('valid', 'invalid')", (project_id,)).fetchall():
                if writer:
                    ok, total = writer_counts.get(writer, [0, 0])
                    writer_counts[writer] = [ok + (status == "valid"), total + 1]
            for writer, (ok, total) in writer_counts.items():
                entry(writer)["validated_ok"] = ok / total

            verifier_counts: dict[str, list[int]] = {}
            for (task_id,) in self._conn.execute(
                    "SELECT task_id FROM tasks WHERE project_id = ? AND "
                    "kind = 'qa_verify' AND state = 'complete' AND "
                    "is_qualification = 0", (project_id,)).fetchall():
                subs = self._conn.execute(
                    "SELECT worker_id, payload FROM submissions WHERE task_id = ? "
                    "ORDER BY sub_id", (task_id,)).fetchall()
                if len(subs) != 2:
                    continue
                (w1, p1), (w2, p2) = subs
                agree = bool(json.loads(p1)["valid"]) == bool(json.loads(p2)["valid"])
                for w in (w1, w2):
                    ok, total = verifier_counts.get(w, [0, 0])
                    verifier_counts[w] = [ok + agree, total + 1]
            for worker, (ok, total) in verifier_counts.items():
                entry(worker)["peer_agreement_rate"] = ok / total
            return stats

    def update_qualifications(self, project_id: str) -> list[dict]:
        """Revoke writer / verifier qualifications that fell below threshold.

        Writers need their verified QAs to come out valid; verifiers need to
        agree with their co-verifier.  Both are judged only once at least
        ``min_signal`` finalized items exist for the worker.
        """
        config = self._config(project_id)
        min_signal = int(config.get("min_signal", 20))
        changes = []
        with self._lock:
            writer_stats: dict[str, list[int]] = {}
            for writer, status in self._conn.execute(
                    "SELECT writer, status FROM qas WHERE project_id = ? AND "
                    "status IN ('valid', 'invalid')", (project_id,)).fetchall():
                if not writer:
                    continue
                ok, total = writer_stats.get(writer, [0, 0])
                writer_stats[writer] = [ok + (status == "valid"), total + 1]
            for writer, (ok, total) in sorted(writer_stats.items()):
                if total >= min_signal and ok / total <= config["writer_ok_threshold"]:
                    if "qa_write" in self._worker_quals(writer):
                        self.qualify(writer, "qa_write", False)
                        changes.append({"worker_id": writer, "kind": "qa_write",
                                        "action": "revoked", "rate": ok / total})

            verifier_stats: dict[str, list[int]] = {}
            for (task_id,) in self._conn.execute(
                    "SELECT task_id FROM tasks WHERE project_id = ? AND kind = 'qa_verify' "
                    "AND state = 'complete' AND is_qualification = 0",
                    (project_id,)).fetchall():
                subs = self._conn.execute(
                    "SELECT worker_id, payload FROM submissions WHERE task_id = ? "
                    "ORDER BY sub_id", (task_id,)).fetchall()
                if len(subs) != 2:
                    continue
                (w1, p1), (w2, p2) = subs
                agree = bool(json.loads(p1)["valid"]) == bool(json.loads(p2)["valid"])
                for w in (w1, w2):
                    ok, total = verifier_stats.get(w, [0, 0])
                    verifier_stats[w] = [ok + agree, total + 1]
            for worker, (ok, total) in sorted(verifier_stats.items()):
                if total >= min_signal and ok / total <= config["verifier_agreement_threshold"]:
                    if "qa_verify" in self._worker_quals(worker):
                        self.qualify(worker, "qa_verify", False)
                        changes.append({"worker_id": worker, "kind": "qa_verify",
                                        "action": "revoked", "rate": ok / total})
            return changes

    # ------------------------------------------------------------------
    # reporting and export

    def agreement_dashboard(self, project_id: str) -> dict:
        """Percent agreement on verification, both-valid rate, presence alpha."""
        self._config(project_id)  # existence check
        with self._lock:
            agree = both_valid = pairs = 0
            for (task_id,) in self._conn.execute(
                    "SELECT task_id FROM tasks WHERE project_id = ? AND kind = 'qa_verify' "
                    "AND state = 'complete' AND is_qualification = 0",
                    (project_id,)).fetchall():
                subs = self._conn.execute(
                    "SELECT payload FROM submissions WHERE task_id = ? ORDER BY sub_id",
                    (task_id,)).fetchall()
                if len(subs) != 2:
                    continue
                v1 = bool(json.loads(subs[0][0])["valid"])
                v2 = bool(json.loads(subs[1][0])["valid"])
                pairs += 1
                agree += v1 == v2
                both_valid += v1 and v2

            items: dict[tuple, list[str]] = {}
            for task_id, payload in self._conn.execute(
                    "SELECT s.task_id, s.payload FROM submissions s JOIN tasks t "
                    "ON s.task_id = t.task_id WHERE t.project_id = ? AND "
                    "t.kind = 'presence' AND t.is_qualification = 0 ORDER BY s.sub_id",
                    (project_id,)).fetchall():
                for qa_id, label in json.loads(payload)["labels"].items():
                    items.setdefault((task_id, qa_id), []).append(label)
            alpha = None
            pairable = [labels for labels in items.values() if len(labels) >= 2]
            if len(pairable) >= 2 and sum(len(p) for p in pairable) >= 2:
                alpha = metaeval.krippendorff_alpha_binary(list(items.values()))

            return {
                "verification_pairs": pairs,
                "pairwise_agreement": agree / pairs if pairs else None,
                "fraction_both_valid": both_valid / pairs if pairs else None,
                "presence_items": len(items),
                "krippendorff_alpha": alpha,
            }

    def export_final(self, project_id: str, partial: bool = False) -> dict:
        """Corpus-ready QA and judgment records plus a provenance sidecar.

        Only valid QAs and majority judgments are exported; worker ids are
        pseudonymized in the sidecar.  Incomplete projects require
        ``partial=True`` and then export only finalized items.
        """
        self._config(project_id)
        with self._lock:
            open_tasks = self._conn.execute(
                "SELECT COUNT(*) FROM tasks WHERE project_id = ? AND state = 'open' AND "
                "is_qualification = 0", (project_id,)).fetchone()[0]
            if open_tasks and not partial:
                raise InputError(f"project {project_id!r} has {open_tasks} open tasks; "
                                 "pass partial=True to export finalized items only")
            qa_rows = self._conn.execute(
                "SELECT qa_id, example_id, sentence_index, predicate, question, answers "
                "FROM qas WHERE project_id = ? AND status = 'valid' ORDER BY qa_id",
                (project_id,)).fetchall()
            qas = [record_to_dict(QAPair(
                qa_id=r[0], example_id=r[1], sentence_index=r[2],
                predicate=PredicateSpan(**json.loads(r[3])), question=r[4],
                answers=tuple(json.loads(r[5])), status="valid")) for r in qa_rows]
            judgment_rows = self._conn.execute(
                "SELECT qa_id, system_id, label, source FROM judgments WHERE "
                "project_id = ? ORDER BY qa_id, system_id", (project_id,)).fetchall()
            judgments = [record_to_dict(PresenceJudgment(
                qa_id=r[0], system_id=r[1], source_id=r[3], label=r[2]))
                for r in judgment_rows]

            workers = [w[0] for w in self._conn.execute(
                "SELECT DISTINCT s.worker_id FROM submissions s JOIN tasks t ON "
                "s.task_id = t.task_id WHERE t.project_id = ? ORDER BY s.worker_id",
                (project_id,)).fetchall()]
            pseudonyms = {w: f"W{i + 1:03d}" for i, w in enumerate(workers)}
            provenance = [{"pseudonym": pseudonyms[w], "kind": k, "task_id": t}
                          for t, w, k in self._conn.execute(
                              "SELECT s.task_id, s.worker_id, t.kind FROM submissions s "
                              "JOIN tasks t ON s.task_id = t.task_id WHERE "
                              "t.project_id = ? ORDER BY s.task_id, s.worker_id",
                              (project_id,)).fetchall()]
            flags = [{"kind": k, "ref": ref, "note": note}
                     for k, ref, note in self._conn.execute(
                         "SELECT kind, ref, note FROM flags WHERE project_id = ? "
                         "ORDER BY kind, ref", (project_id,)).fetchall()]
            return {"qas": qas, "judgments": judgments, "provenance": provenance,
                    "flags": flags, "complete": open_tasks == 0}

    def close(self) -> None:
        with self._lock:
            self._conn.close()


def record_to_dict_predicate(span: PredicateSpan) -> dict:
    return {"sentence_index": span.sentence_index, "token_index": span.token_index,
            "surface": span.surface}
