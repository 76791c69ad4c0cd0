/** Debug console page logic. The page never mutates its own picture of
 * the session: every change arrives through the event stream (or a
 * fresh snapshot on reconnect) and the DOM is re-rendered from the
 * view model. Commands go out through one path and their replies are
 * shown verbatim. */

import {
  applyEvent,
  fromSnapshot,
  suspendedThreads,
  type GatewayEvent,
  type RankTile,
  type SessionView,
  type Snapshot,
} from "./model.js";
import { openEventStream } from "./stream.js";

interface AppState {
  view: SessionView;
  gatewayUp: boolean;
  log: string[];
}

const LOG_LIMIT = 200;

const state: AppState = {
  view: { ranks: {} },
  gatewayUp: false,
  log: [],
};

function appendLog(line: string): void {
  state.log.push(line);
  if (state.log.length > LOG_LIMIT) {
    state.log.splice(0, state.log.length - LOG_LIMIT);
  }
}

async function fetchSnapshot(): Promise<void> {
  const resp = await fetch("/api/ranks");
  if (!resp.ok) {
    throw new Error(`snapshot fetch failed: ${resp.status}`);
  }
  const snapshot = (await resp.json()) as Snapshot;
  state.view = fromSnapshot(snapshot);
  render();
}

/** Single command path. target is a rank number or "all". */
async function issueCommand(target: number | "all", cmd: string): Promise<void> {
  if (!state.gatewayUp) {
    return;
  }
  try {
    let resp: Response;
    if (target === "all") {
      resp = await fetch("/api/broadcast", {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ cmd }),
      });
    } else {
      resp = await fetch(`/api/ranks/${target}/command`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ cmd }),
      });
    }
    const body = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) {
      appendLog(`! ${cmd} -> ${String(body["error"] ?? resp.status)}`);
    } else if (target === "all") {
      const responses = body["responses"] as Record<string, string[]>;
      for (const rank of Object.keys(responses).sort((a, b) => Number(a) - Number(b))) {
        appendLog(`[${rank}] ${cmd} -> ${(responses[rank] ?? []).join(" | ")}`);
      }
    } else {
      const lines = body["response"] as string[];
      appendLog(`[${target}] ${cmd} -> ${lines.join(" | ")}`);
    }
  } catch (err) {
    appendLog(`! ${cmd} -> ${String(err)}`);
  }
  render();
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function button(label: string, onClick: () => void): HTMLButtonElement {
  const b = el("button", "ctl", label);
  b.disabled = !state.gatewayUp;
  b.addEventListener("click", onClick);
  return b;
}

function renderTile(tile: RankTile): HTMLElement {
  const card = el("section", tile.connected ? "tile" : "tile closed");
  const head = el("header");
  head.appendChild(el("h2", undefined, `rank ${tile.rank}`));
  head.appendChild(
    el("span", "conn", tile.connected ? "connected" : "closed"),
  );
  card.appendChild(head);

  const threads = el("ul", "threads");
  for (const tid of Object.keys(tile.threads).sort((a, b) => Number(a) - Number(b))) {
    const tstate = tile.threads[tid] ?? "?";
    const row = el("li", `thread ${tstate.toLowerCase()}`);
    row.appendChild(el("span", "tid", `thread ${tid}`));
    row.appendChild(el("span", "tstate", tstate));
    if (tstate === "SUSPENDED") {
      row.appendChild(
        button("step", () => void issueCommand(tile.rank, `STEP ${tid}`)),
      );
      row.appendChild(
        button("stack", () => void issueCommand(tile.rank, `STACK ${tid}`)),
      );
    }
    const frames = tile.frames[tid];
    if (frames && frames.length > 0) {
      row.appendChild(el("span", "frames", frames.join(" < ")));
    }
    threads.appendChild(row);
  }
  card.appendChild(threads);

  if (tile.breakpoints.length > 0) {
    const chips = el("div", "chips");
    for (const name of tile.breakpoints) {
      chips.appendChild(el("span", "chip", name));
    }
    card.appendChild(chips);
  }
  if (tile.lastHit !== null) {
    card.appendChild(el("div", "hit", `last hit: ${tile.lastHit}`));
  }

  const actions = el("div", "actions");
  actions.appendChild(
    button("suspend", () => void issueCommand(tile.rank, "SUSPEND")),
  );
  actions.appendChild(
    button("resume", () => void issueCommand(tile.rank, "RESUME")),
  );
  if (suspendedThreads(tile).length > 0) {
    const inspectBox = el("input", "inspect-input") as HTMLInputElement;
    inspectBox.placeholder = "inspect name";
    inspectBox.disabled = !state.gatewayUp;
    actions.appendChild(inspectBox);
    actions.appendChild(
      button("inspect", () => {
        const name = inspectBox.value.trim();
        if (name) {
          void issueCommand(tile.rank, `INSPECT ${name}`);
        }
      }),
    );
  }
  card.appendChild(actions);
  return card;
}

function render(): void {
  const root = document.getElementById("app");
  if (root === null) {
    return;
  }
  root.replaceChildren();

  const banner = el(
    "div",
    state.gatewayUp ? "banner up" : "banner down",
    state.gatewayUp
      ? "gateway connected"
      : "gateway unreachable, retrying...",
  );
  root.appendChild(banner);

  const toolbar = el("div", "toolbar");
  const bpInput = el("input") as HTMLInputElement;
  bpInput.placeholder = "function name";
  bpInput.id = "bp-name";
  bpInput.disabled = !state.gatewayUp;
  toolbar.appendChild(bpInput);
  toolbar.appendChild(
    button("break all", () => {
      const name = bpInput.value.trim();
      if (name) {
        void issueCommand("all", `BREAK ${name}`);
      }
    }),
  );
  toolbar.appendChild(
    button("clear all", () => {
      const name = bpInput.value.trim();
      if (name) {
        void issueCommand("all", `CLEAR ${name}`);
      }
    }),
  );
  toolbar.appendChild(
    button("suspend all", () => void issueCommand("all", "SUSPEND")),
  );
  toolbar.appendChild(
    button("resume all", () => void issueCommand("all", "RESUME")),
  );
  root.appendChild(toolbar);

  const grid = el("div", "grid");
  const keys = Object.keys(state.view.ranks).sort(
    (a, b) => Number(a) - Number(b),
  );
  for (const key of keys) {
    const tile = state.view.ranks[key];
    if (tile) {
      grid.appendChild(renderTile(tile));
    }
  }
  root.appendChild(grid);

  const log = el("pre", "log", state.log.join("\n"));
  root.appendChild(log);
  log.scrollTop = log.scrollHeight;
}

function main(): void {
  render();
  openEventStream("", {
    onEvent: (ev: GatewayEvent) => {
      state.view = applyEvent(state.view, ev);
      render();
    },
    onUp: () => {
      state.gatewayUp = true;
      // re-sync: events sent while we were away are gone for good
      void fetchSnapshot().catch(() => undefined);
      render();
    },
    onDown: () => {
      if (state.gatewayUp) {
        appendLog("! gateway connection lost");
      }
      state.gatewayUp = false;
      render();
    },
  });
}

main();
