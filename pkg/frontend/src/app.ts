/**
 * Session state machine for one annotator. Holds the current task view,
 * applies edits with client-side caps, persists drafts locally, and
 * submits with optimistic advance to the next task. Framework-free: the
 * DOM layer binds to this and re-renders from `renderHtml`.
 */

import { ApiClient, ApiError, AuthError, NetworkError } from "./api.js";
import {
  MAX_ANSWERS_PER_QUESTION,
  MAX_QUESTIONS_PER_PREDICATE,
  type PresenceLabel,
  type TaskKind,
} from "./constants.js";
import { DraftStore } from "./drafts.js";
import {
  renderEmptyQueue,
  renderPresence,
  renderQaVerify,
  renderQaWrite,
  renderReauthPrompt,
} from "./render.js";
import type {
  PresencePayload,
  QaEntry,
  QaVerifyPayload,
  QaWritePayload,
  SubmissionAck,
  SubmissionPayload,
  Task,
} from "./types.js";
import {
  validatePresence,
  validateQaWrite,
  validateVerify,
  type ValidationResult,
} from "./validation.js";

export interface QaWriteForm {
  entries: QaEntry[];
}

export interface VerifyForm {
  valid: boolean | null;
  answer: string;
  duplicate: boolean;
}

export interface PresenceForm {
  labels: Record<string, PresenceLabel | null>;
  cursor: number;
}

export type ViewState =
  | { status: "idle" }
  | { status: "empty"; taskKind: TaskKind }
  | { status: "reauth" }
  | { status: "task"; task: Task; form: QaWriteForm | VerifyForm | PresenceForm };

export class AnnotationApp {
  state: ViewState = { status: "idle" };
  serverError: string | null = null;
  retryBanner = false;
  private submitting = false;

  constructor(
    private readonly api: ApiClient,
    private readonly drafts: DraftStore,
    readonly worker: string,
  ) {}

  // ------------------------------------------------------------------
  // queue

  async fetchNext(kind: TaskKind): Promise<ViewState> {
    this.serverError = null;
    this.retryBanner = false;
    let task: Task | null;
    try {
      task = await this.api.nextTask(this.worker, kind);
    } catch (error) {
      if (error instanceof AuthError) {
        this.state = { status: "reauth" };
        return this.state;
      }
      if (error instanceof NetworkError) {
        this.retryBanner = true;
        return this.state;
      }
      throw error;
    }
    if (task === null) {
      this.state = { status: "empty", taskKind: kind };
      return this.state;
    }
    this.state = { status: "task", task, form: this.freshForm(task) };
    return this.state;
  }

  private freshForm(task: Task): QaWriteForm | VerifyForm | PresenceForm {
    const draft = this.drafts.load<QaWriteForm | VerifyForm | PresenceForm>(
      task.task_id,
    );
    if (draft !== null) return draft;
    if (task.kind === "qa_write") {
      return { entries: [{ question: "", answers: [""] }] };
    }
    if (task.kind === "qa_verify") {
      return { valid: null, answer: "", duplicate: false };
    }
    const payload = task.payload as PresencePayload;
    const labels: Record<string, PresenceLabel | null> = {};
    for (const qa of payload.qas) labels[qa.qa_id] = null;
    return { labels, cursor: 0 };
  }

  private currentTask(): Task {
    if (this.state.status !== "task") throw new Error("no active task");
    return this.state.task;
  }

  private saveDraft(): void {
    if (this.state.status === "task") {
      this.drafts.save(this.state.task.task_id, this.state.form);
    }
  }

  // ------------------------------------------------------------------
  // qa_write edits (caps enforced here, before anything reaches the server)

  private writeForm(): QaWriteForm {
    const task = this.currentTask();
    if (task.kind !== "qa_write") throw new Error("not a QA-writing task");
    return this.state.status === "task" ? (this.state.form as QaWriteForm) : (() => { throw new Error("no form"); })();
  }

  addQuestion(): boolean {
    const form = this.writeForm();
    if (form.entries.length >= MAX_QUESTIONS_PER_PREDICATE) return false;
    form.entries.push({ question: "", answers: [""] });
    this.saveDraft();
    return true;
  }

  removeQuestion(index: number): void {
    const form = this.writeForm();
    form.entries.splice(index, 1);
    this.saveDraft();
  }

  setQuestion(index: number, text: string): void {
    this.writeForm().entries[index].question = text;
    this.saveDraft();
  }

  addAnswer(questionIndex: number): boolean {
    const entry = this.writeForm().entries[questionIndex];
    if (entry.answers.length >= MAX_ANSWERS_PER_QUESTION) return false;
    entry.answers.push("");
    this.saveDraft();
    return true;
  }

  setAnswer(questionIndex: number, answerIndex: number, text: string): void {
    this.writeForm().entries[questionIndex].answers[answerIndex] = text;
    this.saveDraft();
  }

  // ------------------------------------------------------------------
  // qa_verify edits

  private verifyForm(): VerifyForm {
    const task = this.currentTask();
    if (task.kind !== "qa_verify") throw new Error("not a verification task");
    return (this.state as { form: VerifyForm }).form;
  }

  setVerdict(valid: boolean): void {
    this.verifyForm().valid = valid;
    this.saveDraft();
  }

  setVerifyAnswer(text: string): void {
    this.verifyForm().answer = text;
    this.saveDraft();
  }

  markDuplicate(duplicate: boolean): void {
    this.verifyForm().duplicate = duplicate;
    this.saveDraft();
  }

  // ------------------------------------------------------------------
  // presence edits and keyboard shortcuts

  private presenceForm(): PresenceForm {
    const task = this.currentTask();
    if (task.kind !== "presence") throw new Error("not a presence task");
    return (this.state as { form: PresenceForm }).form;
  }

  setLabel(qaId: string, label: PresenceLabel): void {
    const form = this.presenceForm();
    if (!(qaId in form.labels)) throw new Error(`unknown QA ${qaId}`);
    form.labels[qaId] = label;
    this.saveDraft();
  }

  /** p / n label the focused row and advance; arrows move the cursor. */
  handleKey(key: string): boolean {
    if (this.state.status !== "task" || this.currentTask().kind !== "presence") {
      return false;
    }
    const payload = this.currentTask().payload as PresencePayload;
    const form = this.presenceForm();
    if (key === "ArrowDown" || key === "j") {
      form.cursor = Math.min(form.cursor + 1, payload.qas.length - 1);
      return true;
    }
    if (key === "ArrowUp" || key === "k") {
      form.cursor = Math.max(form.cursor - 1, 0);
      return true;
    }
    if (key === "p" || key === "n") {
      const qa = payload.qas[form.cursor];
      this.setLabel(qa.qa_id, key === "p" ? "present" : "not_present");
      form.cursor = Math.min(form.cursor + 1, payload.qas.length - 1);
      return true;
    }
    return false;
  }

  // ------------------------------------------------------------------
  // validation and submission

  validate(): ValidationResult {
    const task = this.currentTask();
    if (task.kind === "qa_write") {
      return validateQaWrite(this.trimmedEntries());
    }
    if (task.kind === "qa_verify") {
      const form = this.verifyForm();
      return validateVerify(form.valid, form.answer);
    }
    const payload = task.payload as PresencePayload;
    return validatePresence(payload.qas, this.presenceForm().labels);
  }

  canSubmit(): boolean {
    return this.state.status === "task" && !this.submitting && this.validate().ok;
  }

  private trimmedEntries(): QaEntry[] {
    return this.writeForm().entries.map((entry) => ({
      question: entry.question.trim(),
      answers: entry.answers.map((a) => a.trim()).filter((a) => a !== ""),
    }));
  }

  buildPayload(): SubmissionPayload {
    const task = this.currentTask();
    if (task.kind === "qa_write") {
      return { qas: this.trimmedEntries() };
    }
    if (task.kind === "qa_verify") {
      const form = this.verifyForm();
      return {
        valid: form.valid === true,
        answer: form.answer.trim(),
        duplicate: form.duplicate,
      };
    }
    const form = this.presenceForm();
    const labels: Record<string, PresenceLabel> = {};
    for (const [qaId, label] of Object.entries(form.labels)) {
      if (label === null) throw new Error("presence form incomplete");
      labels[qaId] = label;
    }
    return { labels };
  }

  /**
   * Submit the current view and optimistically advance to the next task
   * of the same kind. One in-flight submission per session; the server's
   * replay semantics make retrying the same payload safe.
   */
  async submitCurrent(): Promise<SubmissionAck | null> {
    if (this.state.status !== "task" || this.submitting) return null;
    const validation = this.validate();
    if (!validation.ok) {
      this.serverError = validation.problems.join("; ");
      return null;
    }
    const task = this.currentTask();
    const payload = this.buildPayload();
    this.submitting = true;
    try {
      const ack = await this.api.submit(task.task_id, this.worker, payload);
      this.drafts.clear(task.task_id);
      this.serverError = null;
      this.retryBanner = false;
      await this.fetchNext(task.kind);
      return ack;
    } catch (error) {
      if (error instanceof AuthError) {
        this.state = { status: "reauth" };
        return null;
      }
      if (error instanceof NetworkError) {
        // keep the form and the local draft; the banner offers a retry
        this.retryBanner = true;
        this.saveDraft();
        return null;
      }
      if (error instanceof ApiError) {
        // server rejected the payload: re-open the form with its message
        this.serverError = error.message;
        return null;
      }
      throw error;
    } finally {
      this.submitting = false;
    }
  }

  // ------------------------------------------------------------------
  // rendering

  renderHtml(): string {
    if (this.state.status === "idle") return "";
    if (this.state.status === "empty") return renderEmptyQueue(this.state.taskKind);
    if (this.state.status === "reauth") return renderReauthPrompt();
    const task = this.state.task;
    const banner = this.retryBanner
      ? `<div class="banner retry">Network trouble; your draft is saved. <button class="retry">Retry</button></div>`
      : "";
    const error = this.serverError
      ? `<div class="banner error">${this.serverError.replace(/&/g, "&amp;").replace(/</g, "&lt;")}</div>`
      : "";
    if (task.kind === "qa_write") {
      return banner + error + renderQaWrite(task.payload as QaWritePayload,
        this.state.form as QaWriteForm);
    }
    if (task.kind === "qa_verify") {
      return banner + error + renderQaVerify(task.payload as QaVerifyPayload);
    }
    return banner + error + renderPresence(task.payload as PresencePayload,
      (this.state.form as PresenceForm).labels);
  }
}
