/** Minimal server-sent-events reader over fetch. The gateway emits
 * `data: {json}` frames plus comment keepalives; we only care about the
 * data frames. EventSource would do, but a hand-rolled reader works in
 * both the browser and vitest's node environment, so the tests exercise
 * the same transport the page uses. */

import type { GatewayEvent } from "./model.js";

export interface StreamHandlers {
  onEvent: (ev: GatewayEvent) => void;
  onUp?: () => void;
  onDown?: () => void;
}

export interface StreamHandle {
  close: () => void;
}

function parseSseChunk(buffer: string, emit: (data: string) => void): string {
  // frames are separated by a blank line; hold back the trailing partial
  let rest = buffer;
  for (;;) {
    const cut = rest.indexOf("\n\n");
    if (cut < 0) {
      return rest;
    }
    const frame = rest.slice(0, cut);
    rest = rest.slice(cut + 2);
    for (const line of frame.split("\n")) {
      if (line.startsWith("data:")) {
        emit(line.slice(5).trimStart());
      }
      // lines starting with ":" are keepalives, skip
    }
  }
}

export function openEventStream(
  baseUrl: string,
  handlers: StreamHandlers,
): StreamHandle {
  let closed = false;
  let controller: AbortController | null = null;
  let backoffMs = 500;

  async function readLoop(): Promise<void> {
    while (!closed) {
      controller = new AbortController();
      try {
        const resp = await fetch(`${baseUrl}/api/events`, {
          signal: controller.signal,
          headers: { accept: "text/event-stream" },
        });
        if (!resp.ok || resp.body === null) {
          throw new Error(`events endpoint returned ${resp.status}`);
        }
        handlers.onUp?.();
        backoffMs = 500;
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        let buffer = "";
        for (;;) {
          const { value, done } = await reader.read();
          if (done) {
            break;
          }
          buffer += decoder.decode(value, { stream: true });
          buffer = parseSseChunk(buffer, (data) => {
            try {
              handlers.onEvent(JSON.parse(data) as GatewayEvent);
            } catch {
              // a malformed frame is the server's bug, not a reason to die
            }
          });
        }
      } catch {
        // fall through to the reconnect wait below
      }
      if (closed) {
        return;
      }
      handlers.onDown?.();
      await new Promise((resolve) => setTimeout(resolve, backoffMs));
      backoffMs = Math.min(backoffMs * 2, 5000);
    }
  }

  void readLoop();
  return {
    close: () => {
      closed = true;
      controller?.abort();
    },
  };
}
