/** Pure view model: the rendered state is a function of the gateway
 * snapshot plus the event stream applied in arrival order. Nothing in
 * here invents state the gateway did not report. */

export interface GatewayEvent {
  ts: number;
  rank: number;
  kind: string;
  args: string[];
}

export interface SnapshotThread {
  id: number;
  state: string;
}

export interface SnapshotRank {
  rank: number;
  connected: boolean;
  threads: SnapshotThread[];
  breakpoints: string[];
  frames: Record<string, string[]>;
  last_event_ts: number | null;
}

export interface Snapshot {
  ranks: SnapshotRank[];
}

export interface RankTile {
  rank: number;
  connected: boolean;
  threads: Record<string, string>; // thread id -> state name
  breakpoints: string[];
  frames: Record<string, string[]>; // thread id -> innermost-first names
  lastEventTs: number | null;
  lastHit: string | null;
}

export interface SessionView {
  ranks: Record<string, RankTile>;
}

export function fromSnapshot(snapshot: Snapshot): SessionView {
  const ranks: Record<string, RankTile> = {};
  for (const entry of snapshot.ranks) {
    const threads: Record<string, string> = {};
    for (const t of entry.threads) {
      threads[String(t.id)] = t.state;
    }
    ranks[String(entry.rank)] = {
      rank: entry.rank,
      connected: entry.connected,
      threads,
      breakpoints: [...entry.breakpoints],
      frames: { ...entry.frames },
      lastEventTs: entry.last_event_ts,
      lastHit: null,
    };
  }
  return { ranks };
}

function cloneTile(tile: RankTile): RankTile {
  return {
    ...tile,
    threads: { ...tile.threads },
    breakpoints: [...tile.breakpoints],
    frames: { ...tile.frames },
  };
}

/** Apply one gateway event; returns a new view, input untouched. */
export function applyEvent(view: SessionView, ev: GatewayEvent): SessionView {
  const key = String(ev.rank);
  const prev = view.ranks[key];
  if (prev === undefined) {
    return view; // event for a rank the snapshot never mentioned
  }
  const tile = cloneTile(prev);
  tile.lastEventTs = ev.ts;
  switch (ev.kind) {
    case "THREAD": {
      const [tid, state] = ev.args;
      if (tid !== undefined && state !== undefined) {
        tile.threads[tid] = state;
        if (state === "RUNNING") {
          delete tile.frames[tid];
        }
      }
      break;
    }
    case "BREAKPOINTS":
      tile.breakpoints = [...ev.args];
      break;
    case "FRAMES": {
      const [tid, ...frames] = ev.args;
      if (tid !== undefined) {
        tile.frames[tid] = frames;
      }
      break;
    }
    case "HIT": {
      // the agent suspends the hitting thread before reporting it
      const name = ev.args[0];
      const tid = ev.args[1];
      tile.lastHit = name ?? null;
      if (tid !== undefined) {
        tile.threads[tid] = "SUSPENDED";
      }
      break;
    }
    case "SUSPENDED": {
      const tid = ev.args[0];
      if (tid !== undefined) {
        tile.threads[tid] = "SUSPENDED";
      }
      break;
    }
    case "CLOSED":
      tile.connected = false;
      break;
    default:
      break; // unknown kinds still bump lastEventTs
  }
  return { ranks: { ...view.ranks, [key]: tile } };
}

export function replay(snapshot: Snapshot, events: GatewayEvent[]): SessionView {
  let view = fromSnapshot(snapshot);
  for (const ev of events) {
    view = applyEvent(view, ev);
  }
  return view;
}

export function suspendedThreads(tile: RankTile): string[] {
  return Object.keys(tile.threads)
    .filter((tid) => tile.threads[tid] === "SUSPENDED")
    .sort((a, b) => Number(a) - Number(b));
}

export function anySuspended(view: SessionView): boolean {
  return Object.values(view.ranks).some(
    (tile) => suspendedThreads(tile).length > 0,
  );
}
