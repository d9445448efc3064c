// Client-side opaque session identity, persisted across page loads.

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

const KEY = "impchat.session";

/** Random 128-bit hex id; the server treats it as opaque. */
export function newSessionId(
  randomBytes: (n: number) => Uint8Array = (n) =>
    crypto.getRandomValues(new Uint8Array(n)),
): string {
  return Array.from(randomBytes(16), (b) => b.toString(16).padStart(2, "0")).join("");
}

export function loadOrCreateSessionId(storage: StorageLike): string {
  const existing = storage.getItem(KEY);
  if (existing && /^[0-9a-f]{32}$/.test(existing)) return existing;
  const fresh = newSessionId();
  storage.setItem(KEY, fresh);
  return fresh;
}

export function resetSessionId(storage: StorageLike): string {
  const fresh = newSessionId();
  storage.setItem(KEY, fresh);
  return fresh;
}
