// Entry point: one configuration screen (base URL, session, observer, token),
// then the rating queue. Credentials persist locally so a reload drops the
// rater back where they were.

import { SegexApi } from "./api.js";
import type { Credentials } from "./api.js";
import { RaterController } from "./controller.js";
import { RaterView } from "./ui.js";

const CONFIG_KEY = "segex-rater-config";

function readSaved(): Credentials | null {
  try {
    const raw = localStorage.getItem(CONFIG_KEY);
    return raw ? (JSON.parse(raw) as Credentials) : null;
  } catch {
    return null;
  }
}

function configScreen(root: HTMLElement, onReady: (c: Credentials) => void): void {
  const saved = readSaved();
  root.replaceChildren();
  const form = document.createElement("form");
  form.className = "config";
  const fields: Array<[keyof Credentials, string]> = [
    ["baseUrl", "Service URL"],
    ["sessionId", "Session id"],
    ["observer", "Observer id"],
    ["token", "Token"],
  ];
  const inputs = new Map<string, HTMLInputElement>();
  for (const [name, label] of fields) {
    const row = document.createElement("label");
    row.textContent = label;
    const input = document.createElement("input");
    input.name = name;
    input.value = saved?.[name] ?? (name === "baseUrl" ? window.location.origin : "");
    inputs.set(name, input);
    row.appendChild(input);
    form.appendChild(row);
  }
  const go = document.createElement("button");
  go.textContent = "Start rating";
  form.appendChild(go);
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const credentials: Credentials = {
      baseUrl: inputs.get("baseUrl")!.value.replace(/\/$/, ""),
      sessionId: inputs.get("sessionId")!.value.trim(),
      observer: inputs.get("observer")!.value.trim(),
      token: inputs.get("token")!.value.trim(),
    };
    localStorage.setItem(CONFIG_KEY, JSON.stringify(credentials));
    onReady(credentials);
  });
  root.appendChild(form);
}

async function startRating(root: HTMLElement, credentials: Credentials): Promise<void> {
  const api = new SegexApi(credentials);
  const controller = new RaterController(api, localStorage);
  try {
    await controller.start();
  } catch (error) {
    const message = document.createElement("div");
    message.className = "error";
    message.textContent = `Could not load session: ${String(error)}`;
    const back = document.createElement("button");
    back.textContent = "Back";
    back.addEventListener("click", () => boot(root));
    root.replaceChildren(message, back);
    return;
  }
  new RaterView(root, controller).mount();
}

function boot(root: HTMLElement): void {
  configScreen(root, (credentials) => void startRating(root, credentials));
}

const root = document.getElementById("app");
if (root) boot(root);
