"""Function-level timing built from probe enter/exit events.

Each thread owns a timer stack. Enter pushes (name, start, child_time);
exit pops, computes inclusive = now - start and exclusive = inclusive -
child_time, then adds the child's inclusive time to the parent frame and
bumps the parent's subroutine count. All arithmetic is integer
microsecond ticks. A synthetic root named ".application" spans each
thread's first to last event, so summed exclusive ticks equal the root's
inclusive ticks exactly.

Recursion: exclusive time accumulates on every frame, but inclusive time
is added only when the outermost frame of a recursive chain exits, so a
function never reports more inclusive time than wall time.

Output files are named profile.<node>.<context>.<thread> (context is
always 0; node comes from MPX_PROF_NODE, default 0; thread indices are
dense in first-probe order). With tracing on, trace.<node>.<context>.<thread>
holds one timestamped line per event.
"""
from __future__ import annotations

import atexit
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .errors import ConfigError

ROOT_NAME = ".application"


def monotonic_us() -> int:
    return time.monotonic_ns() // 1000


def quote_name(name: str) -> str:
    """Double-quote a function name, backslash-escaping quotes and backslashes."""
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


def unquote_name(token: str) -> str:
    """Inverse of quote_name; raises ValueError on malformed input."""
    if len(token) < 2 or token[0] != '"' or token[-1] != '"':
        raise ValueError(f"not a quoted name: {token!r}")
    body = token[1:-1]
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            if i + 1 >= len(body) or body[i + 1] not in ('"', "\\"):
                raise ValueError(f"bad escape in {token!r}")
            out.append(body[i + 1])
            i += 2
        elif ch == '"':
            raise ValueError(f"unescaped quote in {token!r}")
        else:
            out.append(ch)
            i += 1
    return "".join(out)


@dataclass(frozen=True)
class ProfileIdentity:
    node: int
    context: int
    thread: int

    def filename(self, prefix: str = "profile") -> str:
        return f"{prefix}.{self.node}.{self.context}.{self.thread}"


@dataclass
class FunctionStats:
    name: str
    calls: int = 0
    subrs: int = 0
    excl_us: int = 0
    incl_us: int = 0


@dataclass(frozen=True)
class TraceEvent:
    ts_us: int
    thread: int
    kind: str  # "enter" | "exit"
    name: str


class _Frame:
    __slots__ = ("name", "start", "child_us")

    def __init__(self, name: str, start: int):
        self.name = name
        self.start = start
        self.child_us = 0


class _ThreadProfile:
    """Accounting state owned by one thread (keyed by its probe identity)."""

    def __init__(self, index: int, key: int):
        self.index = index
        self.key = key
        self.stack: list[_Frame] = []
        self.stats: dict[str, FunctionStats] = {}
        self.depth: dict[str, int] = {}
        self.first_ts: Optional[int] = None
        self.last_ts: Optional[int] = None
        self.trace: list[TraceEvent] = []
        self.error: Optional[str] = None

    def _stat(self, stats: dict[str, FunctionStats], name: str) -> FunctionStats:
        st = stats.get(name)
        if st is None:
            st = stats[name] = FunctionStats(name)
        return st

    def on_enter(self, name: str, ts: int, tracing: bool) -> None:
        if self.error:
            return
        if self.first_ts is None:
            self.first_ts = ts
            self.stack.append(_Frame(ROOT_NAME, ts))
        self.last_ts = ts
        self.stack.append(_Frame(name, ts))
        self.depth[name] = self.depth.get(name, 0) + 1
        if tracing:
            self.trace.append(TraceEvent(ts, self.index, "enter", name))

    def on_exit(self, name: str, ts: int, tracing: bool) -> None:
        if self.error:
            return
        if len(self.stack) < 2 or self.stack[-1].name != name:
            top = self.stack[-1].name if len(self.stack) > 1 else None
            self.error = f"unbalanced exit: got {name!r}, open frame is {top!r}"
            return
        self.last_ts = ts
        if tracing:
            self.trace.append(TraceEvent(ts, self.index, "exit", name))
        self._close_top(self.stack, self.stats, self.depth, ts)

    def _close_top(
        self,
        stack: list[_Frame],
        stats: dict[str, FunctionStats],
        depth: dict[str, int],
        ts: int,
    ) -> None:
        frame = stack.pop()
        incl = ts - frame.start
        excl = incl - frame.child_us
        st = self._stat(stats, frame.name)
        st.calls += 1
        st.excl_us += excl
        d = depth.get(frame.name, 0)
        depth[frame.name] = d - 1
        if d == 1:
            st.incl_us += incl
        parent = stack[-1]
        parent.child_us += incl
        self._stat(stats, parent.name).subrs += 1

    def finalize(self) -> tuple[list[FunctionStats], Optional[str]]:
        """Produce closed stats without touching live accumulators (idempotent)."""
        if self.first_ts is None:
            return [], self.error
        stats = {
            n: FunctionStats(s.name, s.calls, s.subrs, s.excl_us, s.incl_us)
            for n, s in self.stats.items()
        }
        stack = [_Frame(f.name, f.start) for f in self.stack]
        for copy, live in zip(stack, self.stack):
            copy.child_us = live.child_us
        depth = dict(self.depth)
        ts = self.last_ts if self.last_ts is not None else self.first_ts
        error = self.error
        while len(stack) > 1:
            # open frames at flush time are closed virtually at the last event
            self._close_top(stack, stats, depth, ts)
        root = stack.pop()
        incl = ts - root.start
        st = self._stat(stats, ROOT_NAME)
        st.calls += 1
        st.excl_us += incl - root.child_us
        st.incl_us += incl
        return list(stats.values()), error


def format_profile(rows: Iterable[FunctionStats], comments: Iterable[str] = ()) -> str:
    ordered = sorted(rows, key=lambda s: (-s.excl_us, s.name))
    lines = [f"{len(ordered)} functions"]
    for s in ordered:
        lines.append(f"{quote_name(s.name)} {s.calls} {s.subrs} {s.excl_us} {s.incl_us}")
    lines.append("0 aggregates")
    for c in comments:
        lines.append(f"# {c}")
    return "\n".join(lines) + "\n"


def format_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(
        f"{e.ts_us} {e.thread} {e.kind} {quote_name(e.name)}\n" for e in events
    )


class Profiler:
    """Process-wide collector; per-thread state is keyed by the event's thread id."""

    def __init__(
        self,
        *,
        enabled: bool = True,
        node: int = 0,
        out_dir: str | Path = ".",
        trace: bool = False,
    ):
        self.enabled = enabled
        self.node = node
        self.out_dir = Path(out_dir)
        self.trace = trace
        self._threads: dict[int, _ThreadProfile] = {}
        self._lock = threading.Lock()

    def on_event(self, site) -> None:
        """Consume a probe site (needs .name, .kind, .thread, .timestamp)."""
        if not self.enabled:
            return
        tp = self._threads.get(site.thread)
        if tp is None:
            with self._lock:
                tp = self._threads.get(site.thread)
                if tp is None:
                    tp = _ThreadProfile(len(self._threads), site.thread)
                    self._threads[site.thread] = tp
        if site.kind == "enter":
            tp.on_enter(site.name, site.timestamp, self.trace)
        elif site.kind == "exit":
            tp.on_exit(site.name, site.timestamp, self.trace)
        else:
            raise ValueError(f"unknown probe kind {site.kind!r}")

    def identity(self, thread_index: int) -> ProfileIdentity:
        return ProfileIdentity(self.node, 0, thread_index)

    def accounting_errors(self) -> dict[int, str]:
        with self._lock:
            return {tp.index: tp.error for tp in self._threads.values() if tp.error}

    def thread_rows(self) -> dict[int, list[FunctionStats]]:
        """Finalized stats per thread index, without writing files."""
        with self._lock:
            profiles = sorted(self._threads.values(), key=lambda t: t.index)
        return {tp.index: tp.finalize()[0] for tp in profiles}

    def _write(self, path: Path, text: str) -> None:
        try:
            path.write_bytes(text.encode("utf-8"))
        except OSError:
            try:
                path.unlink()
            except OSError:
                pass
            raise

    def flush(self) -> list[Path]:
        """Write profile (and trace) files; safe to call repeatedly."""
        if not self.enabled:
            return []
        with self._lock:
            profiles = sorted(self._threads.values(), key=lambda t: t.index)
        written: list[Path] = []
        if not profiles:
            ident = self.identity(0)
            path = self.out_dir / ident.filename()
            self._write(path, format_profile([]))
            written.append(path)
            if self.trace:
                tpath = self.out_dir / ident.filename("trace")
                self._write(tpath, "")
                written.append(tpath)
            return written
        for tp in profiles:
            rows, error = tp.finalize()
            comments = [f"thread {tp.index} key {tp.key}"]
            if error:
                comments.append(f"invalid: {error}")
            ident = self.identity(tp.index)
            path = self.out_dir / ident.filename()
            self._write(path, format_profile(rows, comments))
            written.append(path)
            if self.trace:
                tpath = self.out_dir / ident.filename("trace")
                self._write(tpath, format_trace(tp.trace))
                written.append(tpath)
        return written


_current: Optional[Profiler] = None
_install_lock = threading.Lock()


def current() -> Optional[Profiler]:
    return _current


def install(profiler: Optional[Profiler]) -> None:
    global _current
    with _install_lock:
        _current = profiler


def _flush_quietly(profiler: Profiler) -> None:
    try:
        profiler.flush()
    except OSError:
        pass  # interpreter shutdown may outlive temp dirs


def enable(
    environment: Optional[Mapping[str, str]] = None,
    *,
    install_hooks: bool = True,
) -> Profiler:
    """Build a profiler from MPX_* environment variables.

    MPX_PROFILE=1 turns collection on; anything else yields a disabled
    handle whose on_event/flush are no-ops. An unwritable MPX_PROF_DIR is
    fatal here, not at flush time.
    """
    env = os.environ if environment is None else environment
    on = env.get("MPX_PROFILE") == "1"
    try:
        node = int(env.get("MPX_PROF_NODE", "0") or "0")
    except ValueError:
        raise ConfigError(f"bad MPX_PROF_NODE: {env.get('MPX_PROF_NODE')!r}") from None
    out_dir = env.get("MPX_PROF_DIR", ".") or "."
    tracing = env.get("MPX_TRACE") == "1"
    prof = Profiler(enabled=on, node=node, out_dir=out_dir, trace=tracing)
    if not on:
        return prof
    try:
        prof.out_dir.mkdir(parents=True, exist_ok=True)
        probe = prof.out_dir / ".mpx-write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"profile dir not writable: {prof.out_dir}: {exc}") from exc
    if install_hooks:
        install(prof)
        atexit.register(_flush_quietly, prof)
    return prof
