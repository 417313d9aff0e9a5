/**
 * Client-side validation mirroring the server's caps. Submission stays
 * disabled until these pass, so the server never sees a cap violation
 * from this client.
 */

import {
  MAX_ANSWERS_PER_QUESTION,
  MAX_QUESTIONS_PER_PREDICATE,
  type PresenceLabel,
} from "./constants.js";
import type { QaEntry, QaRef } from "./types.js";

export interface ValidationResult {
  ok: boolean;
  problems: string[];
}

export function validateQaWrite(entries: QaEntry[]): ValidationResult {
  const problems: string[] = [];
  if (entries.length === 0) {
    problems.push("write at least one question");
  }
  if (entries.length > MAX_QUESTIONS_PER_PREDICATE) {
    problems.push(`at most ${MAX_QUESTIONS_PER_PREDICATE} questions per predicate`);
  }
  entries.forEach((entry, index) => {
    if (!entry.question.trim()) {
      problems.push(`question ${index + 1} is empty`);
    }
    const answers = entry.answers.filter((a) => a.trim() !== "");
    if (answers.length === 0) {
      problems.push(`question ${index + 1} needs at least one answer`);
    }
    if (answers.length > MAX_ANSWERS_PER_QUESTION) {
      problems.push(
        `question ${index + 1} has more than ${MAX_ANSWERS_PER_QUESTION} answers`,
      );
    }
  });
  return { ok: problems.length === 0, problems };
}

export function validateVerify(valid: boolean | null, answer: string): ValidationResult {
  const problems: string[] = [];
  if (valid === null) {
    problems.push("choose valid or invalid");
  }
  if (valid === true && !answer.trim()) {
    problems.push("a valid verdict needs your answer to the question");
  }
  return { ok: problems.length === 0, problems };
}

export function validatePresence(
  qas: QaRef[],
  labels: Record<string, PresenceLabel | null>,
): ValidationResult {
  const missing = qas.filter((qa) => !labels[qa.qa_id]);
  return {
    ok: missing.length === 0,
    problems: missing.map((qa) => `no judgment for "${qa.question}"`),
  };
}
