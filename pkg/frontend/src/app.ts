// DOM wiring for the chat page: transcript, image upload, streaming, stats.

import { loadOrCreateSessionId, resetSessionId } from "./session.js";
import { fetchStats, streamChat, HttpError, StreamDroppedError } from "./streamClient.js";
import { stageSegments, statRows } from "./timingPanel.js";
import {
  buildChatRequest,
  validateSubmission,
  DEFAULT_MAX_IMAGE_BYTES,
  type PendingImage,
  type SubmitInput,
} from "./submit.js";
import type { StageTimings } from "./types.js";

const baseUrl = window.location.origin;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const transcript = el<HTMLDivElement>("transcript");
const form = el<HTMLFormElement>("composer");
const textInput = el<HTMLTextAreaElement>("text-input");
const imageInput = el<HTMLInputElement>("image-input");
const imageInfo = el<HTMLSpanElement>("image-info");
const sendButton = el<HTMLButtonElement>("send");
const banner = el<HTMLDivElement>("banner");
const statsPanel = el<HTMLDivElement>("stats-panel");
const modelLine = el<HTMLDivElement>("model-line");
const newSessionButton = el<HTMLButtonElement>("new-session");

let sessionId = loadOrCreateSessionId(window.localStorage);
let pendingImage: PendingImage | null = null;
let busy = false;
let lastInput: SubmitInput | null = null;

function setBusy(value: boolean): void {
  busy = value;
  textInput.disabled = value;
  imageInput.disabled = value;
  sendButton.disabled = value;
  sendButton.textContent = value ? "…" : "Send";
}

function showBanner(message: string, retry: boolean): void {
  banner.textContent = message;
  banner.classList.remove("hidden");
  if (retry && lastInput) {
    const button = document.createElement("button");
    button.textContent = "Retry";
    button.onclick = () => {
      banner.classList.add("hidden");
      void runTurn(lastInput!);
    };
    banner.append(" ", button);
  }
}

interface TurnNodes {
  bubble: HTMLDivElement;
  text: HTMLDivElement;
}

function appendTurn(role: "user" | "assistant", text: string, thumb?: string): TurnNodes {
  const bubble = document.createElement("div");
  bubble.className = `turn ${role}`;
  if (thumb) {
    const img = document.createElement("img");
    img.src = thumb;
    img.className = "thumb";
    bubble.appendChild(img);
  }
  const body = document.createElement("div");
  body.className = "text";
  body.textContent = text;
  bubble.appendChild(body);
  transcript.appendChild(bubble);
  transcript.scrollTop = transcript.scrollHeight;
  return { bubble, text: body };
}

function renderStats(stats: StageTimings): void {
  statsPanel.replaceChildren();
  const bar = document.createElement("div");
  bar.className = "stage-bar";
  for (const seg of stageSegments(stats)) {
    const piece = document.createElement("span");
    piece.className = `seg seg-${seg.label}`;
    piece.style.width = `${(seg.fraction * 100).toFixed(1)}%`;
    piece.title = `${seg.label}: ${seg.seconds.toFixed(3)}s`;
    bar.appendChild(piece);
  }
  statsPanel.appendChild(bar);
  const table = document.createElement("dl");
  for (const row of statRows(stats)) {
    const dt = document.createElement("dt");
    dt.textContent = row.label;
    const dd = document.createElement("dd");
    dd.textContent = row.value;
    table.append(dt, dd);
  }
  statsPanel.appendChild(table);
}

async function refreshModelLine(): Promise<void> {
  try {
    const stats = await fetchStats(baseUrl);
    const mib = (stats.model.size_bytes / (1024 * 1024)).toFixed(1);
    modelLine.textContent =
      `${stats.model.name} · ${stats.model.precision} · ${mib} MiB · ` +
      `${stats.model.n_visual_tokens} visual tokens · ${stats.runs.count} runs`;
  } catch {
    modelLine.textContent = "server unreachable";
  }
}

async function runTurn(input: SubmitInput): Promise<void> {
  lastInput = input;
  setBusy(true);
  const thumb = input.image ? `data:image/*;base64,${input.image.b64}` : undefined;
  appendTurn("user", input.text, thumb);
  const reply = appendTurn("assistant", "");
  reply.bubble.classList.add("streaming");
  let done = false;
  try {
    for await (const ev of streamChat(baseUrl, buildChatRequest(input))) {
      if (ev.type === "token") {
        reply.text.textContent += ev.text; // append-only while streaming
        transcript.scrollTop = transcript.scrollHeight;
      } else if (ev.type === "done") {
        renderStats(ev.stats);
        done = true;
      } else {
        throw new HttpError(ev.status ?? 500, ev.message);
      }
    }
    clearImage();
    textInput.value = "";
  } catch (err) {
    reply.bubble.classList.add("failed"); // partial text stays visible
    if (err instanceof HttpError) {
      showBanner(`request failed (${err.status}): ${err.diagnostic}`, false);
      if (err.status === 404 || err.status === 409) {
        sessionId = resetSessionId(window.localStorage);
        showBanner(`${err.diagnostic} — started a fresh session; retry to continue`, true);
      }
    } else if (err instanceof StreamDroppedError) {
      showBanner("connection dropped mid-reply; partial text kept", true);
    } else {
      showBanner(`stream error: ${(err as Error).message}`, true);
    }
  } finally {
    reply.bubble.classList.remove("streaming");
    if (done) banner.classList.add("hidden");
    setBusy(false);
    void refreshModelLine();
  }
}

function clearImage(): void {
  pendingImage = null;
  imageInput.value = "";
  imageInfo.textContent = "";
}

imageInput.addEventListener("change", () => {
  const file = imageInput.files?.[0];
  if (!file) {
    clearImage();
    return;
  }
  if (file.size > DEFAULT_MAX_IMAGE_BYTES) {
    const mib = (file.size / (1024 * 1024)).toFixed(1);
    imageInfo.textContent = `${file.name}: ${mib} MiB is over the upload limit`;
    imageInput.value = "";
    pendingImage = null;
    return;
  }
  const reader = new FileReader();
  reader.onload = () => {
    const url = reader.result as string;
    const b64 = url.slice(url.indexOf(",") + 1);
    pendingImage = { b64, bytes: file.size, name: file.name };
    imageInfo.textContent = `${file.name} (${(file.size / 1024).toFixed(0)} KiB)`;
  };
  reader.readAsDataURL(file);
});

form.addEventListener("submit", (ev) => {
  ev.preventDefault();
  if (busy) return;
  const input: SubmitInput = {
    text: textInput.value,
    image: pendingImage,
    sessionId,
  };
  const verdict = validateSubmission(input);
  if (!verdict.ok) {
    if (verdict.reason !== "nothing to send") showBanner(verdict.reason, false);
    return; // no request issued
  }
  banner.classList.add("hidden");
  void runTurn(input);
});

newSessionButton.addEventListener("click", () => {
  sessionId = resetSessionId(window.localStorage);
  transcript.replaceChildren();
  statsPanel.replaceChildren();
  banner.classList.add("hidden");
});

void refreshModelLine();
