// Queue orchestration: walk the randomized item list in the session's stored
// order, collect scores through RatingFormState, submit, advance. A failed
// submission keeps the entered values so the rater can simply retry.

import { ApiError, SegexApi } from "./api.js";
import type { QueueItemInfo, SessionPayload } from "./api.js";
import { MemoryStorage, RatingFormState } from "./state.js";
import type { StorageLike } from "./state.js";

export interface RaterQueueItem extends QueueItemInfo {
  index: number;
}

export class RaterController {
  payload: SessionPayload | null = null;
  queue: RaterQueueItem[] = [];
  form: RatingFormState | null = null;
  lastError: string | null = null;
  private currentIndex = -1;

  constructor(
    private readonly api: SegexApi,
    private readonly storage: StorageLike = new MemoryStorage(),
  ) {}

  async start(): Promise<void> {
    this.payload = await this.api.loadSession();
    this.queue = this.payload.items.map((item, index) => ({ ...item, index }));
    this.currentIndex = this.queue.findIndex((item) => !item.done);
    this.openForm();
  }

  get criteria() {
    return this.payload?.criteria ?? [];
  }

  current(): RaterQueueItem | null {
    return this.currentIndex >= 0 ? this.queue[this.currentIndex] : null;
  }

  progress(): { done: number; total: number } {
    return {
      done: this.queue.filter((item) => item.done).length,
      total: this.queue.length,
    };
  }

  finished(): boolean {
    return this.queue.length > 0 && this.queue.every((item) => item.done);
  }

  setScore(criterionId: string, value: number): boolean {
    this.lastError = null;
    return this.form?.set(criterionId, value) ?? false;
  }

  canSubmit(): boolean {
    return this.current() !== null && (this.form?.isComplete() ?? false);
  }

  async submitCurrent(): Promise<boolean> {
    const item = this.current();
    if (!item || !this.form || !this.form.isComplete()) return false;
    try {
      await this.api.submitRating(item.id, this.form.scores());
    } catch (error) {
      // entered scores stay in the form; the rater can retry
      this.lastError =
        error instanceof ApiError ? error.message : "network failure, scores kept - retry";
      return false;
    }
    this.form.clear();
    item.done = true;
    this.currentIndex = this.queue.findIndex((entry) => !entry.done);
    this.openForm();
    return true;
  }

  jumpTo(index: number): void {
    if (index >= 0 && index < this.queue.length && !this.queue[index].done) {
      this.currentIndex = index;
      this.openForm();
    }
  }

  renderUrl(view: "overlay" | "image" | "mask"): string | null {
    const item = this.current();
    if (!item || !this.payload) return null;
    if (!this.payload.include_image) return this.api.renderUrl(item, "mask");
    return this.api.renderUrl(item, view);
  }

  private openForm(): void {
    const item = this.current();
    this.form = item
      ? new RatingFormState(this.criteria, `draft:${this.payload?.session}:${item.id}`, this.storage)
      : null;
  }
}
