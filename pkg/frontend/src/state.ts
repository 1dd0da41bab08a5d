// Rating form state with draft persistence: everything the rater has entered
// for the current item survives a reload, and submission stays disabled until
// every criterion holds a valid value.

import type { CriterionInfo } from "./api.js";

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export class MemoryStorage implements StorageLike {
  private data = new Map<string, string>();
  getItem(key: string): string | null {
    return this.data.has(key) ? this.data.get(key)! : null;
  }
  setItem(key: string, value: string): void {
    this.data.set(key, value);
  }
  removeItem(key: string): void {
    this.data.delete(key);
  }
}

export function validScore(criterion: CriterionInfo, value: number): boolean {
  if (!Number.isInteger(value)) return false;
  if (criterion.kind === "binary") return value === 0 || value === 1;
  return value >= 1 && value <= 4;
}

export class RatingFormState {
  private values = new Map<string, number>();

  constructor(
    readonly criteria: CriterionInfo[],
    private readonly draftKey: string,
    private readonly storage: StorageLike,
  ) {
    this.restore();
  }

  set(criterionId: string, value: number): boolean {
    const criterion = this.criteria.find((c) => c.id === criterionId);
    if (!criterion || !validScore(criterion, value)) return false;
    this.values.set(criterionId, value);
    this.persist();
    return true;
  }

  get(criterionId: string): number | undefined {
    return this.values.get(criterionId);
  }

  isComplete(): boolean {
    return this.criteria.every((c) => this.values.has(c.id));
  }

  scores(): Record<string, number> {
    const out: Record<string, number> = {};
    for (const [key, value] of this.values) out[key] = value;
    return out;
  }

  clear(): void {
    this.values.clear();
    this.storage.removeItem(this.draftKey);
  }

  private persist(): void {
    this.storage.setItem(this.draftKey, JSON.stringify(this.scores()));
  }

  private restore(): void {
    const raw = this.storage.getItem(this.draftKey);
    if (!raw) return;
    try {
      const parsed = JSON.parse(raw) as Record<string, number>;
      for (const [key, value] of Object.entries(parsed)) this.set(key, value);
    } catch {
      this.storage.removeItem(this.draftKey);
    }
  }
}
