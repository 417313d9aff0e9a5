/**
 * Local draft persistence: nothing a worker typed is lost to a network
 * failure. Backed by localStorage in the browser and by any conforming
 * store in tests.
 */

export interface KeyValueStore {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export class DraftStore {
  constructor(
    private readonly store: KeyValueStore,
    private readonly worker: string,
  ) {}

  private key(taskId: string): string {
    return `qapyramid-draft:${this.worker}:${taskId}`;
  }

  save(taskId: string, draft: unknown): void {
    this.store.setItem(this.key(taskId), JSON.stringify(draft));
  }

  load<T>(taskId: string): T | null {
    const raw = this.store.getItem(this.key(taskId));
    if (raw === null) return null;
    try {
      return JSON.parse(raw) as T;
    } catch {
      return null;
    }
  }

  clear(taskId: string): void {
    this.store.removeItem(this.key(taskId));
  }
}
