// Chat transport: newline-delimited JSON event streaming plus one-shot calls.

import type { ChatEvent, ChatRequest, ChatResponse, ServerStats } from "./types.js";

export class HttpError extends Error {
  constructor(
    public status: number,
    public diagnostic: string,
  ) {
    super(`server returned ${status}: ${diagnostic}`);
  }
}

export class StreamOrderError extends Error {}

export class StreamDroppedError extends Error {}

type FetchLike = typeof fetch;

async function* ndjsonLines(
  stream: ReadableStream<Uint8Array>,
): AsyncGenerator<unknown> {
  const reader = stream.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  try {
    for (;;) {
      const { value, done } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let nl: number;
      while ((nl = buffer.indexOf("\n")) >= 0) {
        const line = buffer.slice(0, nl).trim();
        buffer = buffer.slice(nl + 1);
        if (line) yield JSON.parse(line);
      }
    }
    const tail = (buffer + decoder.decode()).trim();
    if (tail) yield JSON.parse(tail);
  } finally {
    reader.releaseLock();
  }
}

async function raiseForStatus(res: Response): Promise<void> {
  if (res.ok) return;
  let diagnostic = res.statusText;
  try {
    const body = (await res.json()) as { error?: string };
    if (body.error) diagnostic = body.error;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new HttpError(res.status, diagnostic);
}

function asChatEvent(raw: unknown): ChatEvent {
  const ev = raw as ChatEvent;
  if (
    ev === null ||
    typeof ev !== "object" ||
    !("type" in ev) ||
    (ev.type !== "token" && ev.type !== "done" && ev.type !== "error")
  ) {
    throw new Error(`malformed stream event: ${JSON.stringify(raw)}`);
  }
  return ev;
}

/**
 * POST a streaming chat turn and yield its events in order.
 *
 * Token events must arrive with consecutive indices starting at 0; a gap or
 * reordering aborts the turn. A stream that ends without a done or error
 * event is reported as dropped so partial text can be kept but flagged.
 */
export async function* streamChat(
  baseUrl: string,
  request: ChatRequest,
  fetchImpl: FetchLike = fetch,
): AsyncGenerator<ChatEvent> {
  const res = await fetchImpl(`${baseUrl}/v1/chat`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ ...request, stream: true }),
  });
  await raiseForStatus(res);
  if (!res.body) throw new StreamDroppedError("response had no body");
  let expected = 0;
  let finished = false;
  for await (const raw of ndjsonLines(res.body)) {
    const ev = asChatEvent(raw);
    if (ev.type === "token") {
      if (ev.index !== expected) {
        throw new StreamOrderError(
          `token event index ${ev.index}, expected ${expected}`,
        );
      }
      expected += 1;
    } else {
      finished = true;
    }
    yield ev;
    if (finished) return;
  }
  throw new StreamDroppedError("stream ended before a done event");
}

/** Non-streaming chat call returning the full text and its stage timings. */
export async function chatOnce(
  baseUrl: string,
  request: ChatRequest,
  fetchImpl: FetchLike = fetch,
): Promise<ChatResponse> {
  const res = await fetchImpl(`${baseUrl}/v1/chat`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ ...request, stream: false }),
  });
  await raiseForStatus(res);
  return (await res.json()) as ChatResponse;
}

export async function fetchStats(
  baseUrl: string,
  fetchImpl: FetchLike = fetch,
): Promise<ServerStats> {
  const res = await fetchImpl(`${baseUrl}/v1/stats`);
  await raiseForStatus(res);
  return (await res.json()) as ServerStats;
}
