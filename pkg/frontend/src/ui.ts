// DOM layer: renders the current item with its criteria form and wires the
// keyboard-first workflow. Digit keys score the highlighted criterion, arrows
// move between criteria, V toggles overlay/image, Enter submits.

import type { RaterController } from "./controller.js";

const ZOOMS = [1, 2, 4]; // capped at 4x so raters stay comparable

export class RaterView {
  private activeCriterion = 0;
  private view: "overlay" | "image" = "overlay";
  private zoomIndex = 0;

  constructor(
    private readonly root: HTMLElement,
    private readonly controller: RaterController,
  ) {}

  mount(): void {
    document.addEventListener("keydown", (event) => this.onKey(event));
    this.render();
  }

  private onKey(event: KeyboardEvent): void {
    if (this.controller.finished() || !this.controller.current()) return;
    const criteria = this.controller.criteria;
    if (event.key === "ArrowDown" || event.key === "Tab") {
      this.activeCriterion = (this.activeCriterion + 1) % criteria.length;
      event.preventDefault();
    } else if (event.key === "ArrowUp") {
      this.activeCriterion = (this.activeCriterion + criteria.length - 1) % criteria.length;
      event.preventDefault();
    } else if (event.key === "v" || event.key === "V") {
      this.view = this.view === "overlay" ? "image" : "overlay";
    } else if (event.key === "z" || event.key === "Z") {
      this.zoomIndex = (this.zoomIndex + 1) % ZOOMS.length;
    } else if (event.key === "Enter") {
      void this.submit();
    } else if (/^[0-9]$/.test(event.key)) {
      const criterion = criteria[this.activeCriterion];
      if (criterion && this.controller.setScore(criterion.id, Number(event.key))) {
        this.activeCriterion = Math.min(this.activeCriterion + 1, criteria.length - 1);
      }
    } else {
      return;
    }
    this.render();
  }

  private async submit(): Promise<void> {
    if (!this.controller.canSubmit()) return;
    await this.controller.submitCurrent();
    this.activeCriterion = 0;
    this.view = "overlay";
    this.render();
  }

  render(): void {
    const item = this.controller.current();
    const progress = this.controller.progress();
    this.root.replaceChildren();

    const header = document.createElement("div");
    header.className = "progress";
    header.textContent = this.controller.finished()
      ? `All ${progress.total} items rated - thank you`
      : `Item ${progress.done + 1} of ${progress.total}`;
    this.root.appendChild(header);

    if (!item) return;

    const stage = document.createElement("div");
    stage.className = "stage";
    const image = document.createElement("img");
    const url = this.controller.renderUrl(this.view);
    if (url) image.src = url;
    image.style.width = `${ZOOMS[this.zoomIndex] * 100}%`;
    image.alt = "item under review";
    stage.appendChild(image);
    this.root.appendChild(stage);

    const hint = document.createElement("div");
    hint.className = "hint";
    hint.textContent = "digits: score | arrows: criterion | V: toggle view | Z: zoom | Enter: submit";
    this.root.appendChild(hint);

    const form = document.createElement("div");
    form.className = "criteria";
    this.controller.criteria.forEach((criterion, index) => {
      const row = document.createElement("div");
      row.className = "criterion" + (index === this.activeCriterion ? " active" : "");
      const label = document.createElement("span");
      const value = this.controller.form?.get(criterion.id);
      label.textContent = `${criterion.id}: ${criterion.description}`;
      row.appendChild(label);
      const choices = document.createElement("span");
      choices.className = "choices";
      const options = criterion.kind === "binary" ? [0, 1] : [1, 2, 3, 4];
      for (const option of options) {
        const button = document.createElement("button");
        button.textContent = String(option);
        button.className = value === option ? "chosen" : "";
        button.addEventListener("click", () => {
          this.activeCriterion = index;
          this.controller.setScore(criterion.id, option);
          this.render();
        });
        choices.appendChild(button);
      }
      row.appendChild(choices);
      form.appendChild(row);
    });
    this.root.appendChild(form);

    const submit = document.createElement("button");
    submit.className = "submit";
    submit.textContent = "Submit (Enter)";
    submit.disabled = !this.controller.canSubmit();
    submit.addEventListener("click", () => void this.submit());
    this.root.appendChild(submit);

    if (this.controller.lastError) {
      const error = document.createElement("div");
      error.className = "error";
      error.textContent = this.controller.lastError;
      this.root.appendChild(error);
    }
  }
}
