/**
 * HTML rendering for the three task views. Pure string producers so they
 * are testable without a DOM; every piece of task text is escaped, and
 * predicate highlighting works at the token level so markup-like tokens
 * survive intact.
 */

import type { PresenceLabel } from "./constants.js";
import type {
  PresencePayload,
  QaVerifyPayload,
  QaWritePayload,
} from "./types.js";
import type { QaWriteForm } from "./app.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

/** Wrap the predicate token (by index, not by text match) in a mark tag. */
export function highlightPredicate(sentence: string, tokenIndex: number): string {
  const tokens = sentence.split(/\s+/).filter((t) => t !== "");
  return tokens
    .map((token, index) =>
      index === tokenIndex
        ? `<mark class="predicate">${escapeHtml(token)}</mark>`
        : escapeHtml(token),
    )
    .join(" ");
}

export function renderQaWrite(payload: QaWritePayload, form: QaWriteForm): string {
  const rows = form.entries
    .map((entry, qi) => {
      const answers = entry.answers
        .map(
          (answer, ai) =>
            `<input class="answer" data-q="${qi}" data-a="${ai}" ` +
            `value="${escapeHtml(answer)}">`,
        )
        .join("");
      return (
        `<li><input class="question" data-q="${qi}" ` +
        `value="${escapeHtml(entry.question)}">${answers}` +
        `<button class="add-answer" data-q="${qi}">+ answer</button></li>`
      );
    })
    .join("");
  return (
    `<section class="task qa-write">` +
    `<p class="sentence">${highlightPredicate(payload.sentence, payload.predicate.token_index)}</p>` +
    `<ol class="questions">${rows}</ol>` +
    `<button class="add-question">+ question</button>` +
    `</section>`
  );
}

export function renderQaVerify(payload: QaVerifyPayload): string {
  const duplicate = payload.duplicate_flag
    ? `<p class="duplicate-flag">possible duplicate of an earlier QA</p>`
    : "";
  return (
    `<section class="task qa-verify">` +
    `<p class="sentence">${highlightPredicate(payload.sentence, payload.predicate.token_index)}</p>` +
    duplicate +
    `<p class="question">${escapeHtml(payload.qa.question)}</p>` +
    `<label><input type="radio" name="verdict" value="valid"> valid</label>` +
    `<label><input type="radio" name="verdict" value="invalid"> invalid</label>` +
    `<input class="verify-answer" placeholder="your answer">` +
    `</section>`
  );
}

export function renderPresence(
  payload: PresencePayload,
  labels: Record<string, PresenceLabel | null>,
): string {
  // the reference is shown next to the system summary so judges can
  // resolve pronouns and ground each QA
  const rows = payload.qas
    .map((qa, index) => {
      const picked = labels[qa.qa_id];
      const mark = (value: PresenceLabel) =>
        picked === value ? ` checked` : "";
      return (
        `<li data-qa="${escapeHtml(qa.qa_id)}">` +
        `<span class="qa">${escapeHtml(qa.question)} ${escapeHtml(qa.answers.join("; "))}</span>` +
        `<label><input type="radio" name="label-${index}" value="present"${mark("present")}> present</label>` +
        `<label><input type="radio" name="label-${index}" value="not_present"${mark("not_present")}> not present</label>` +
        `</li>`
      );
    })
    .join("");
  return (
    `<section class="task presence">` +
    `<div class="reference"><h3>Reference</h3><p>${escapeHtml(payload.reference_text)}</p></div>` +
    `<div class="summary"><h3>System summary (${escapeHtml(payload.system_id)})</h3>` +
    `<p>${escapeHtml(payload.summary_text)}</p></div>` +
    `<ul class="qa-list">${rows}</ul>` +
    `<p class="hint">keys: p = present, n = not present, arrows move</p>` +
    `</section>`
  );
}

export function renderEmptyQueue(kind: string): string {
  return `<section class="empty">No ${escapeHtml(kind)} tasks available right now.</section>`;
}

export function renderReauthPrompt(): string {
  return `<section class="reauth">Session expired. Enter a new token to continue.</section>`;
}
