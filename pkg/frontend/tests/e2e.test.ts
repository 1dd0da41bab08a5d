// End-to-end acceptance: a rater completes a four-item blinded session through
// the UI's controller against the real rating service, the sealed report
// reflects every entered score, and nothing in the observed network traffic
// hints at which items are references and which are model output.

import assert from "node:assert/strict";
import { after, before, test } from "node:test";
import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { SegexApi, type TrafficEntry } from "../src/api.js";
import { RaterController } from "../src/controller.js";
import { MemoryStorage } from "../src/state.js";

const PYTHON = process.env.PYTHON ?? "python3";

// markers that would deblind a rater; checked against JSON traffic and URLs
const TEXT_MARKERS = ["source", "GT", "ground", "truth", "pred", '"P"'];
// full words only for binary payloads, where two-byte collisions are noise
const BINARY_MARKERS = ["ground_truth", "prediction", "source"];

let workDir: string;
let sessionDir: string;
let server: ChildProcess;
let baseUrl: string;
let sessionId: string;
let observerToken: string;
const traffic: TrafficEntry[] = [];

function buildFixture(): void {
  workDir = mkdtempSync(join(tmpdir(), "segex-e2e-"));
  sessionDir = join(workDir, "session");
  const script = `
import sys
import numpy as np
from pathlib import Path
from adasam.phantom import save_image, save_mask

root = Path(sys.argv[1])
for name in ("gt", "pred", "images"):
    (root / name).mkdir(parents=True, exist_ok=True)
for i in range(2):
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[6 + i : 14 + i, 6:14] = 1
    mask[20:26, 18 + i : 25 + i] = 2
    save_mask(mask, root / "gt" / f"slice_{i:03d}.png")
    jitter = np.roll(mask, shift=1 + i, axis=1)
    save_mask(jitter, root / "pred" / f"slice_{i:03d}.png")
    save_image(np.full((32, 32), 0.4, dtype=np.float32), root / "images" / f"slice_{i:03d}.png")
`;
  execFileSync(PYTHON, ["-c", script, workDir]);
  const built = execFileSync(PYTHON, [
    "-m", "adasam.cli", "segex", "build",
    "--gt", join(workDir, "gt"),
    "--pred", join(workDir, "pred"),
    "--images", join(workDir, "images"),
    "--out", sessionDir,
    "--seed", "12",
    "--observers", "rater1",
  ]).toString();
  const info = JSON.parse(built);
  assert.equal(info.items, 4);
  sessionId = info.session;
  observerToken = info.observers.rater1;
}

async function startServer(): Promise<void> {
  server = spawn(PYTHON, [
    "-m", "adasam.cli", "segex", "serve",
    "--session", sessionDir,
    "--port", "0",
  ]);
  const line: string = await new Promise((resolve, reject) => {
    let buffer = "";
    server.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const newline = buffer.indexOf("\n");
      if (newline >= 0) resolve(buffer.slice(0, newline));
    });
    server.on("error", reject);
    server.on("exit", (code) => reject(new Error(`server exited early: ${code}`)));
    setTimeout(() => reject(new Error("server start timeout")), 20_000);
  });
  baseUrl = JSON.parse(line).url;
}

before(async () => {
  buildFixture();
  await startServer();
});

after(() => {
  server?.kill();
});

test("an observer completes the session through the UI flow", async () => {
  const api = new SegexApi(
    { baseUrl, sessionId, observer: "rater1", token: observerToken },
    (entry) => traffic.push(entry),
  );
  const controller = new RaterController(api, new MemoryStorage());
  await controller.start();

  assert.equal(controller.queue.length, 4);
  assert.equal(controller.progress().done, 0);
  assert.equal(controller.criteria.length, 5);

  // fixed scores per queue position so the report can be cross-checked
  const entered: Record<string, Record<string, number>> = {};
  let position = 0;
  while (!controller.finished()) {
    const item = controller.current();
    assert.ok(item, "queue advanced past the end with items pending");
    assert.equal(controller.canSubmit(), false);
    const scores = { MQ: 1 + (position % 4), MB: 1, CN: position % 2, SD: 2, DC: 1 };
    for (const [criterion, value] of Object.entries(scores)) {
      assert.ok(controller.setScore(criterion, value), `${criterion}=${value} rejected`);
    }
    // also exercise the rendered views a rater would load
    const url = controller.renderUrl(position % 2 === 0 ? "overlay" : "image");
    assert.ok(url);
    const imageResponse = await fetch(url!);
    const body = Buffer.from(await imageResponse.arrayBuffer());
    traffic.push({
      method: "GET", url: url!, requestBody: null,
      responseBody: body.toString("latin1"),
    });
    assert.equal(imageResponse.status, 200);

    entered[item!.id] = scores;
    assert.equal(controller.canSubmit(), true);
    assert.ok(await controller.submitCurrent());
    position += 1;
  }
  assert.equal(controller.progress().done, 4);

  // a fresh load sees all four items completed (persistence round trip)
  const reloaded = new RaterController(api, new MemoryStorage());
  await reloaded.start();
  assert.ok(reloaded.finished());

  // sealed report: four complete ratings matching the entered values
  const reportRaw = execFileSync(PYTHON, [
    "-m", "adasam.cli", "segex", "report",
    "--session", sessionDir,
    "--key", join(sessionDir, "key.sealed"),
  ]).toString();
  const report = JSON.parse(reportRaw);
  assert.deepEqual(report.incomplete, []);
  const totalItems = report.rows
    .filter((row: { muscle: string }) => row.muscle === "vl")
    .reduce((n: number, row: { n_items: number }) => n + row.n_items, 0);
  assert.equal(totalItems, 4);

  const log = readFileSync(join(sessionDir, "ratings.log"), "utf8")
    .trim()
    .split("\n")
    .map((line) => JSON.parse(line));
  assert.equal(log.length, 4);
  for (const rating of log) {
    assert.deepEqual(rating.scores, entered[rating.item], `scores for ${rating.item}`);
  }
});

test("network traffic carries no source indicators", () => {
  assert.ok(traffic.length >= 5, "expected recorded traffic from the rating flow");
  for (const entry of traffic) {
    for (const marker of TEXT_MARKERS) {
      assert.ok(!entry.url.includes(marker), `marker ${marker} in url ${entry.url}`);
      if (entry.requestBody) {
        assert.ok(!entry.requestBody.includes(marker), `marker ${marker} in request`);
      }
    }
    const isPng = entry.responseBody.startsWith("\x89PNG");
    for (const marker of isPng ? BINARY_MARKERS : TEXT_MARKERS) {
      assert.ok(
        !entry.responseBody.includes(marker),
        `marker ${marker} in response from ${entry.url}`,
      );
    }
  }
});

test("the UI never requests report or key endpoints", () => {
  for (const entry of traffic) {
    assert.ok(!entry.url.includes("/report"), entry.url);
    assert.ok(!entry.url.includes("key"), entry.url);
  }
});

test("failed submissions keep entered scores for retry", async () => {
  const api = new SegexApi(
    { baseUrl, sessionId, observer: "rater1", token: "wrong-token" },
  );
  const controller = new RaterController(api, new MemoryStorage());
  // loading with a bad token is already rejected
  await assert.rejects(() => controller.start());

  const goodApi = new SegexApi(
    { baseUrl, sessionId, observer: "rater1", token: observerToken },
  );
  const flaky = new RaterController(goodApi, new MemoryStorage());
  await flaky.start();
  // all items were rated in the earlier test; jump the controller to a fake
  // pending state by reusing the first item
  flaky.queue[0].done = false;
  flaky.jumpTo(0);
  for (const [criterion, value] of Object.entries({ MQ: 2, MB: 2, CN: 1, SD: 2, DC: 2 })) {
    flaky.setScore(criterion, value);
  }
  // sabotage the credentials mid-flight to force a rejection
  (goodApi as unknown as { credentials: { token: string } }).credentials.token = "broken";
  assert.equal(await flaky.submitCurrent(), false);
  assert.ok(flaky.lastError);
  assert.equal(flaky.form?.get("MQ"), 2); // values retained
  // restore and retry succeeds
  (goodApi as unknown as { credentials: { token: string } }).credentials.token = observerToken;
  assert.equal(await flaky.submitCurrent(), true);
});
