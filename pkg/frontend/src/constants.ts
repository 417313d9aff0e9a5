/**
 * Validation constants shared with the server: the client must never let a
 * payload through that the service would reject for cap violations.
 */

export const MAX_QUESTIONS_PER_PREDICATE = 5;
export const MAX_ANSWERS_PER_QUESTION = 3;

export const KINDS = ["qa_write", "qa_verify", "presence"] as const;
export type TaskKind = (typeof KINDS)[number];

export type PresenceLabel = "present" | "not_present";
