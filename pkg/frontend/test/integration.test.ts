// End-to-end against the real inference server with a deterministic tiny model.
//
// Requires the python package to be installed (`pip install -e .` at the repo
// root); skipped automatically when it is not available.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { chatOnce, fetchStats, streamChat } from "../src/streamClient.js";
import { fmt2 } from "../src/timingPanel.js";
import type { ChatRequest } from "../src/types.js";

const PYTHON = process.env.IMP_PYTHON ?? "python3";

function pythonHasImplite(): boolean {
  const probe = spawnSync(PYTHON, ["-c", "import implite"], { encoding: "utf-8" });
  return probe.status === 0;
}

const available = pythonHasImplite();
const suite = available ? describe : describe.skip;

suite("against a live deterministic server", () => {
  let workdir: string;
  let server: ChildProcess;
  let base: string;

  beforeAll(async () => {
    workdir = mkdtempSync(join(tmpdir(), "impchat-"));
    const model = join(workdir, "tiny.impb");
    const built = spawnSync(PYTHON, ["-m", "implite.testing", model, "--seed", "0"], {
      encoding: "utf-8",
    });
    if (built.status !== 0) throw new Error(`model build failed: ${built.stderr}`);

    server = spawn(PYTHON, [
      "-m",
      "implite.cli",
      "serve",
      "--model",
      model,
      "--port",
      "0",
    ]);
    base = await new Promise<string>((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error("server start timeout")), 30_000);
      let out = "";
      server.stdout!.on("data", (chunk: Buffer) => {
        out += chunk.toString();
        const m = out.match(/listening on (http:\/\/[\d.]+:\d+)/);
        if (m) {
          clearTimeout(timer);
          resolve(m[1]!);
        }
      });
      server.on("exit", (code) => reject(new Error(`server exited early (${code})`)));
    });
  }, 60_000);

  afterAll(() => {
    server?.kill();
    if (workdir) rmSync(workdir, { recursive: true, force: true });
  });

  const request = (sessionId: string): ChatRequest => ({
    session_id: sessionId,
    messages: [{ role: "user", content: "describe yourself briefly" }],
    stream: true,
    generation: { max_new_tokens: 12, temperature: 0, seed: 0, stop_ids: [] },
  });

  it("shows stats panel values that equal /v1/stats to two decimals", async () => {
    const fresh = await fetchStats(base);
    expect(fresh.runs.count).toBe(0);
    expect(fresh.runs.median_s_gen).toBeNull();

    const done = await chatOnce(base, {
      session_id: "integration-stats",
      messages: [{ role: "user", content: "one more turn" }],
      stream: false,
      generation: { max_new_tokens: 8, temperature: 0, seed: 0, stop_ids: [] },
    });

    // a single run's medians are that run's values, to the panel's precision
    const after = await fetchStats(base);
    expect(after.runs.count).toBe(1);
    expect(fmt2(after.runs.median_s_prompt)).toBe(fmt2(done.stats.s_prompt));
    expect(fmt2(after.runs.median_s_gen)).toBe(fmt2(done.stats.s_gen));
    expect(after.model.n_visual_tokens).toBe(196);
    expect(after.model.size_bytes).toBeGreaterThan(0);
  }, 120_000);

  it("renders a streamed transcript byte-identical to the non-streamed reply", async () => {
    const nonStreamed = await chatOnce(base, request("integration-a"));

    let streamed = "";
    let doneStats = null;
    for await (const ev of streamChat(base, request("integration-b"))) {
      if (ev.type === "token") streamed += ev.text;
      if (ev.type === "done") doneStats = ev.stats;
    }
    expect(streamed).toBe(nonStreamed.text);
    expect(doneStats).not.toBeNull();
    expect(doneStats!.n_gen).toBe(12);
    expect(doneStats!.n_prompt).toBe(nonStreamed.stats.n_prompt);
  }, 120_000);
});

if (!available) {
  it("integration suite requires the python package (pip install -e .)", () => {
    expect(available).toBe(false);
  });
}
