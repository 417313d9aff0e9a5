/**
 * Thin client for the annotation service HTTP API. The only endpoints the
 * UI touches are the documented ones; authentication is a bearer token
 * held for the session.
 */

import type { TaskKind } from "./constants.js";
import type { SubmissionAck, SubmissionPayload, Task } from "./types.js";

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
  }
}

/** 401: the session token is missing or no longer accepted. */
export class AuthError extends ApiError {}

/** Transport-level failure: the request may not have reached the server. */
export class NetworkError extends Error {}

export interface ApiClientOptions {
  baseUrl: string;
  token?: string;
  fetchImpl?: typeof fetch;
}

export class ApiClient {
  private readonly baseUrl: string;
  private readonly token?: string;
  private readonly fetchImpl: typeof fetch;

  constructor(options: ApiClientOptions) {
    this.baseUrl = options.baseUrl.replace(/\/$/, "");
    this.token = options.token;
    this.fetchImpl = options.fetchImpl ?? fetch;
  }

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    const base: Record<string, string> = { "Content-Type": "application/json", ...extra };
    if (this.token) base["Authorization"] = `Bearer ${this.token}`;
    return base;
  }

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`, {
        ...init,
        headers: this.headers((init?.headers as Record<string, string>) ?? {}),
      });
    } catch (cause) {
      throw new NetworkError(`request to ${path} failed: ${String(cause)}`);
    }
    if (response.status === 401) {
      throw new AuthError("session expired or unauthorized", 401);
    }
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(detail, response.status);
    }
    return response.json();
  }

  async nextTask(worker: string, kind: TaskKind): Promise<Task | null> {
    const query = `worker=${encodeURIComponent(worker)}&kind=${encodeURIComponent(kind)}`;
    const body = (await this.request(`/tasks/next?${query}`)) as
      | Task
      | { task: null };
    if ("task" in body && body.task === null) return null;
    return body as Task;
  }

  /**
   * One submission per (task, worker): resending the identical payload is
   * an idempotent replay on the server, so the idempotency key is the
   * payload itself and retries are safe.
   */
  async submit(
    taskId: string,
    worker: string,
    payload: SubmissionPayload,
  ): Promise<SubmissionAck> {
    return (await this.request(`/tasks/${encodeURIComponent(taskId)}/submissions`, {
      method: "POST",
      body: JSON.stringify({ worker_id: worker, payload }),
    })) as SubmissionAck;
  }

  async exportProject(projectId: string, partial = false): Promise<unknown> {
    const suffix = partial ? "?partial=true" : "";
    return this.request(`/projects/${encodeURIComponent(projectId)}/export${suffix}`);
  }
}
