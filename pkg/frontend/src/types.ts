/** Wire types of the annotation service API (see docs/http-api.md). */

import type { PresenceLabel, TaskKind } from "./constants.js";

export interface PredicateSpan {
  sentence_index: number;
  token_index: number;
  surface: string;
}

export interface QaRef {
  qa_id: string;
  question: string;
  answers: string[];
}

export interface QaWritePayload {
  example_id: string;
  sentence_index: number;
  sentence: string;
  predicate: PredicateSpan;
}

export interface QaVerifyPayload extends QaWritePayload {
  qa: QaRef;
  duplicate_flag: boolean;
}

export interface PresencePayload {
  example_id: string;
  sentence_index: number;
  system_id: string;
  reference_text: string;
  summary_text: string;
  predicate: PredicateSpan;
  qas: QaRef[];
}

export interface Task {
  task_id: string;
  project_id: string;
  kind: TaskKind;
  payload: QaWritePayload | QaVerifyPayload | PresencePayload;
  required_assignments: number;
  attempt: number;
  qualification: boolean;
}

export interface QaEntry {
  question: string;
  answers: string[];
}

export type SubmissionPayload =
  | { qas: QaEntry[] }
  | { valid: boolean; answer?: string; duplicate?: boolean }
  | { labels: Record<string, PresenceLabel> };

export interface SubmissionAck {
  accepted: boolean;
  replay: boolean;
}
