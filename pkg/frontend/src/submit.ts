// Turn submission rules: what gets sent, and what never leaves the browser.

import type { ChatRequest, GenerationOptions } from "./types.js";

export const DEFAULT_MAX_IMAGE_BYTES = 8 * 1024 * 1024;

export interface PendingImage {
  b64: string; // raw base64, no data: prefix
  bytes: number; // decoded size
  name: string;
}

export interface SubmitInput {
  text: string;
  image: PendingImage | null;
  sessionId: string;
}

export type Validation = { ok: true } | { ok: false; reason: string };

export function validateSubmission(
  input: SubmitInput,
  maxImageBytes: number = DEFAULT_MAX_IMAGE_BYTES,
): Validation {
  if (!input.text.trim() && !input.image) {
    return { ok: false, reason: "nothing to send" };
  }
  if (input.image && input.image.bytes > maxImageBytes) {
    const mib = (input.image.bytes / (1024 * 1024)).toFixed(1);
    const limit = (maxImageBytes / (1024 * 1024)).toFixed(0);
    return {
      ok: false,
      reason: `image is ${mib} MiB, over the ${limit} MiB limit`,
    };
  }
  return { ok: true };
}

/** Build the wire request; a text-only turn carries no image_b64 field at all. */
export function buildChatRequest(
  input: SubmitInput,
  generation?: GenerationOptions,
): ChatRequest {
  const message: ChatRequest["messages"][number] = {
    role: "user",
    content: input.text,
  };
  if (input.image) {
    message.image_b64 = input.image.b64;
  }
  const request: ChatRequest = {
    session_id: input.sessionId,
    messages: [message],
    stream: true,
  };
  if (generation) request.generation = generation;
  return request;
}
