"""mpxdbg: attach to every rank's debug agent and drive them together.

The client reads mpjdev.conf, opens one MDWP connection per rank, and
demultiplexes incoming lines by prefix: EVT lines feed an event log and
a state mirror, THREAD/FRAME lines complete the pending command's
response (their count rides in the OK payload), OK/ERR lines finish
commands. The mirror is only ever updated from OK responses and EVT
traffic, never from local guesses.

Scripts are line-oriented:

    all: <COMMAND>
    rank <N>: <COMMAND>
    wait-hits <K>
    wait-exit

with a 30 s default timeout per wait. The transcript lists each script
line, per-rank responses in rank order, and hit events sorted by rank.
"""
from __future__ import annotations

import argparse
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .conf import ConfFile, read_conf
from .errors import AttachError, ProtocolError, ScriptError, UsageError

DEFAULT_WAIT_TIMEOUT_S = 30.0
DEFAULT_COMMAND_TIMEOUT_S = 30.0
DEFAULT_ATTACH_TIMEOUT_S = 10.0

_COUNTED = {"THREADS", "STACK"}


@dataclass(frozen=True)
class Endpoint:
    address: str
    port: int
    rank: int


@dataclass(frozen=True)
class EventRecord:
    ts: float
    rank: int
    kind: str  # "HIT" | "SUSPENDED"
    args: tuple[str, ...]

    def line(self) -> str:
        return f"EVT {self.kind} {' '.join(self.args)}"


@dataclass
class Response:
    status: str
    lines: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status.startswith("OK")

    def payload(self) -> str:
        return self.status[3:] if self.status.startswith("OK ") else ""

    def all_lines(self) -> list[str]:
        return [self.status] + list(self.lines)


DISCONNECTED = "ERR disconnected"
TIMEOUT = "ERR timeout"


@dataclass
class RankMirror:
    threads: dict[int, str] = field(default_factory=dict)
    breakpoints: set[str] = field(default_factory=set)
    frames: dict[int, tuple[str, ...]] = field(default_factory=dict)
    last_event_ts: Optional[float] = None
    connected: bool = True


class _Pending:
    __slots__ = ("command", "line", "target_tid", "response", "expected", "done")

    def __init__(self, command: str, line: str, target_tid: Optional[int]):
        self.command = command
        self.line = line
        self.target_tid = target_tid
        self.response: Optional[Response] = None
        self.expected = 0
        self.done = threading.Event()


class _RankConnection:
    def __init__(self, session: "Session", endpoint: Endpoint, sock: socket.socket):
        self.endpoint = endpoint
        self.rank = endpoint.rank
        self._session = session
        self._sock = sock
        self._rfile = sock.makefile("r", encoding="utf-8", newline="\n")
        self._cmd_lock = threading.Lock()
        self._pending: Optional[_Pending] = None
        self._pending_lock = threading.Lock()
        self.closed = threading.Event()
        self._reader = threading.Thread(
            target=self._read_loop, name=f"mpxdbg-reader-{self.rank}", daemon=True
        )
        self._reader.start()

    def request(self, line: str, timeout: float = DEFAULT_COMMAND_TIMEOUT_S) -> Response:
        """Send one command and wait for its complete response."""
        word = line.split(" ", 1)[0]
        target_tid: Optional[int] = None
        if word == "STACK":
            parts = line.split()
            if len(parts) == 2 and parts[1].isdigit():
                target_tid = int(parts[1])
        with self._cmd_lock:
            if self.closed.is_set():
                return Response(DISCONNECTED)
            pending = _Pending(word, line, target_tid)
            with self._pending_lock:
                self._pending = pending
            try:
                self._sock.sendall((line + "\n").encode("utf-8"))
            except OSError:
                with self._pending_lock:
                    self._pending = None
                return Response(DISCONNECTED)
            if not pending.done.wait(timeout):
                with self._pending_lock:
                    self._pending = None
                return Response(TIMEOUT)
            assert pending.response is not None
            return pending.response

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass

    # -- reader ---------------------------------------------------------------

    def _read_loop(self) -> None:
        try:
            for raw in self._rfile:
                self._dispatch(raw.rstrip("\n"))
        except OSError:
            pass
        finally:
            self.closed.set()
            with self._pending_lock:
                pending, self._pending = self._pending, None
            if pending is not None:
                pending.response = Response(DISCONNECTED)
                pending.done.set()
            self._session._on_disconnect(self.rank)

    def _dispatch(self, line: str) -> None:
        if line.startswith("EVT "):
            self._session._on_event_line(self.rank, line)
            return
        if line.startswith("THREAD ") or line.startswith("FRAME "):
            with self._pending_lock:
                pending = self._pending
            if pending is not None and pending.response is not None:
                pending.response.lines.append(line)
                self._session._on_detail_line(self.rank, pending, line)
                if len(pending.response.lines) >= pending.expected:
                    with self._pending_lock:
                        self._pending = None
                    # mirror updates happen here, on the reader thread, so
                    # they land in wire order relative to EVT lines
                    self._session._on_response(self.rank, pending.line, pending.response)
                    pending.done.set()
            return
        # OK / ERR: starts (and possibly finishes) the pending response
        with self._pending_lock:
            pending = self._pending
        if pending is None:
            return  # stray line; protocol is lockstep so this is noise
        response = Response(line)
        pending.response = response
        expected = 0
        if response.ok and pending.command in _COUNTED:
            payload = response.payload().strip()
            expected = int(payload) if payload.isdigit() else 0
        pending.expected = expected
        if expected == 0:
            with self._pending_lock:
                self._pending = None
            # applied before done.set() for the same reason as above: a
            # caller must never observe the reply before the mirror does
            self._session._on_response(self.rank, pending.line, pending.response)
            pending.done.set()


class Session:
    """All rank connections plus the mirrored debugger state."""

    def __init__(self, conf: ConfFile):
        self.conf = conf
        self.connections: dict[int, _RankConnection] = {}
        self.mirror: dict[int, RankMirror] = {
            rec.rank: RankMirror() for rec in conf.records
        }
        self.event_log: list[EventRecord] = []
        self._lock = threading.Lock()
        self._wait_cond = threading.Condition(self._lock)
        self._subscribers: list[Callable[[dict], None]] = []

    # -- wiring ---------------------------------------------------------------

    def _publish(self, rank: int, kind: str, args: Sequence[str]) -> None:
        event = {"ts": time.time(), "rank": rank, "kind": kind, "args": list(args)}
        for sub in list(self._subscribers):
            try:
                sub(event)
            except Exception:
                pass

    def subscribe(self, callback: Callable[[dict], None]) -> Callable[[], None]:
        with self._lock:
            self._subscribers.append(callback)

        def cancel() -> None:
            with self._lock:
                if callback in self._subscribers:
                    self._subscribers.remove(callback)

        return cancel

    def _set_thread_state(self, rank: int, tid: int, state: str) -> None:
        mirror = self.mirror[rank]
        if mirror.threads.get(tid) != state:
            mirror.threads[tid] = state
            self._publish(rank, "THREAD", [str(tid), state])

    def _on_event_line(self, rank: int, line: str) -> None:
        parts = line.split(" ")
        with self._lock:
            mirror = self.mirror[rank]
            record: Optional[EventRecord] = None
            if len(parts) >= 5 and parts[1] == "HIT":
                name = " ".join(parts[2:-2])
                tid_s, kind = parts[-2], parts[-1]
                record = EventRecord(time.time(), rank, "HIT", (name, tid_s, kind))
                if tid_s.isdigit():
                    self._set_thread_state(rank, int(tid_s), "SUSPENDED")
            elif len(parts) == 3 and parts[1] == "SUSPENDED":
                record = EventRecord(time.time(), rank, "SUSPENDED", (parts[2],))
                if parts[2].isdigit():
                    self._set_thread_state(rank, int(parts[2]), "SUSPENDED")
            if record is None:
                record = EventRecord(time.time(), rank, parts[1] if len(parts) > 1 else "?", tuple(parts[2:]))
            mirror.last_event_ts = record.ts
            self.event_log.append(record)
            self._publish(rank, record.kind, record.args)
            self._wait_cond.notify_all()

    def _on_detail_line(self, rank: int, pending: _Pending, line: str) -> None:
        parts = line.split(" ")
        with self._lock:
            if parts[0] == "THREAD" and len(parts) == 3 and parts[1].isdigit():
                self._set_thread_state(rank, int(parts[1]), parts[2])

    def _on_response(self, rank: int, command: str, response: Response) -> None:
        if not response.ok:
            return
        word = command.split(" ", 1)[0]
        rest = command[len(word) + 1 :] if " " in command else ""
        with self._lock:
            mirror = self.mirror[rank]
            if word == "BREAK" and rest:
                mirror.breakpoints.add(rest)
                self._publish(rank, "BREAKPOINTS", sorted(mirror.breakpoints))
            elif word == "CLEAR" and rest:
                mirror.breakpoints.discard(rest)
                self._publish(rank, "BREAKPOINTS", sorted(mirror.breakpoints))
            elif word == "SUSPEND":
                for tid, state in list(mirror.threads.items()):
                    if state == "RUNNING":
                        self._set_thread_state(rank, tid, "SUSPEND_REQUESTED")
            elif word == "RESUME":
                targets = (
                    [int(rest)] if rest.strip().isdigit() else list(mirror.threads)
                )
                for tid in targets:
                    if tid in mirror.threads:
                        self._set_thread_state(rank, tid, "RUNNING")
                        mirror.frames.pop(tid, None)
            elif word == "STEP" and rest.strip().isdigit():
                self._set_thread_state(rank, int(rest), "STEPPING")
            elif word == "STACK" and pendings_tid(response, rest) is not None:
                tid = pendings_tid(response, rest)
                frames = tuple(
                    line[len("FRAME ") :] for line in response.lines if line.startswith("FRAME ")
                )
                mirror.frames[tid] = frames
                self._publish(rank, "FRAMES", [str(tid), *frames])
            elif word == "DETACH":
                mirror.breakpoints.clear()
                for tid in list(mirror.threads):
                    self._set_thread_state(rank, tid, "RUNNING")

    def _on_disconnect(self, rank: int) -> None:
        with self._lock:
            mirror = self.mirror[rank]
            mirror.connected = False
            self._publish(rank, "CLOSED", [])
            self._wait_cond.notify_all()

    # -- public API ----------------------------------------------------------

    def ranks(self) -> list[int]:
        return sorted(self.connections)

    def command(self, rank: int, line: str, timeout: float = DEFAULT_COMMAND_TIMEOUT_S) -> Response:
        conn = self.connections.get(rank)
        if conn is None:
            raise ValueError(f"no connection for rank {rank}")
        return conn.request(line, timeout)

    def broadcast(self, line: str, timeout: float = DEFAULT_COMMAND_TIMEOUT_S) -> dict[int, Response]:
        """Send to every rank in rank order; failures become error markers."""
        return {rank: self.command(rank, line, timeout) for rank in self.ranks()}

    def hits(self) -> list[EventRecord]:
        with self._lock:
            return [e for e in self.event_log if e.kind == "HIT"]

    def wait_hits(self, count: int, timeout: float = DEFAULT_WAIT_TIMEOUT_S) -> list[EventRecord]:
        """Block until the session has accumulated `count` EVT HIT records."""
        deadline = time.monotonic() + timeout
        with self._lock:
            while True:
                hits = [e for e in self.event_log if e.kind == "HIT"]
                if len(hits) >= count:
                    return hits
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ScriptError(
                        f"timed out waiting for {count} hits (saw {len(hits)})"
                    )
                self._wait_cond.wait(remaining)

    def wait_exit(self, timeout: float = DEFAULT_WAIT_TIMEOUT_S) -> None:
        """Block until every rank connection has closed."""
        deadline = time.monotonic() + timeout
        with self._lock:
            while True:
                if all(not m.connected for m in self.mirror.values()):
                    return
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    open_ranks = sorted(r for r, m in self.mirror.items() if m.connected)
                    raise ScriptError(f"timed out waiting for exit of ranks {open_ranks}")
                self._wait_cond.wait(remaining)

    def snapshot(self) -> dict:
        with self._lock:
            ranks = []
            for rank in sorted(self.mirror):
                m = self.mirror[rank]
                ranks.append(
                    {
                        "rank": rank,
                        "connected": m.connected,
                        "threads": [
                            {"id": tid, "state": m.threads[tid]} for tid in sorted(m.threads)
                        ],
                        "breakpoints": sorted(m.breakpoints),
                        "frames": {str(t): list(f) for t, f in m.frames.items()},
                        "last_event_ts": m.last_event_ts,
                    }
                )
            return {"ranks": ranks}

    def close(self) -> None:
        for conn in self.connections.values():
            conn.close()


def pendings_tid(response: Response, rest: str) -> Optional[int]:
    rest = rest.strip()
    return int(rest) if rest.isdigit() else None


def endpoints_from_conf(conf: ConfFile) -> list[Endpoint]:
    return [Endpoint(rec.address, rec.debug_port, rec.rank) for rec in conf.records]


def attach_all(
    conf: ConfFile,
    timeout: float = DEFAULT_ATTACH_TIMEOUT_S,
) -> Session:
    """Connect and HELLO every rank; agent identities must match the conf."""
    session = Session(conf)
    deadline = time.monotonic() + timeout
    try:
        for endpoint in endpoints_from_conf(conf):
            sock = None
            last_error: Optional[Exception] = None
            while time.monotonic() < deadline:
                try:
                    sock = socket.create_connection(
                        (endpoint.address, endpoint.port), timeout=timeout
                    )
                    break
                except OSError as exc:
                    last_error = exc
                    time.sleep(0.05)
            if sock is None:
                raise AttachError(
                    f"rank {endpoint.rank}: cannot reach agent at "
                    f"{endpoint.address}:{endpoint.port}: {last_error}"
                )
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _RankConnection(session, endpoint, sock)
            session.connections[endpoint.rank] = conn
            hello = conn.request("HELLO", timeout=timeout)
            if not hello.ok:
                raise AttachError(f"rank {endpoint.rank}: HELLO failed: {hello.status}")
            fields = hello.status.split(" ")
            # OK rank <r> size <n>
            if len(fields) != 5 or fields[1] != "rank" or fields[3] != "size":
                raise ProtocolError(f"rank {endpoint.rank}: bad HELLO reply {hello.status!r}")
            if int(fields[2]) != endpoint.rank:
                raise ProtocolError(
                    f"conf says rank {endpoint.rank} at {endpoint.address}:{endpoint.port}, "
                    f"agent answered rank {fields[2]}"
                )
            if int(fields[4]) != conf.np:
                raise ProtocolError(
                    f"rank {endpoint.rank}: agent reports size {fields[4]}, conf has {conf.np}"
                )
    except BaseException:
        session.close()
        raise
    return session


# -- scripting ----------------------------------------------------------------


def _parse_script_line(line: str) -> Optional[tuple[str, object]]:
    text = line.strip()
    if not text or text.startswith("#"):
        return None
    if text.startswith("all:"):
        return ("all", text[len("all:") :].strip())
    if text.startswith("rank "):
        head, _, cmd = text.partition(":")
        rank_s = head[len("rank ") :].strip()
        if not rank_s.isdigit() or not cmd.strip():
            raise ScriptError(f"bad script line: {line!r}")
        return ("rank", (int(rank_s), cmd.strip()))
    if text.startswith("wait-hits"):
        parts = text.split()
        if len(parts) != 2 or not parts[1].isdigit():
            raise ScriptError(f"bad script line: {line!r}")
        return ("wait-hits", int(parts[1]))
    if text == "wait-exit":
        return ("wait-exit", None)
    raise ScriptError(f"bad script line: {line!r}")


def run_script(
    session: Session,
    script: Sequence[str],
    timeout: float = DEFAULT_WAIT_TIMEOUT_S,
) -> list[str]:
    """Execute a script, returning the transcript; raises ScriptError with
    the partial transcript attached when a wait times out."""
    transcript: list[str] = []

    def record_response(rank: int, response: Response) -> None:
        for line in response.all_lines():
            transcript.append(f"[rank {rank}] {line}")

    for raw in script:
        parsed = _parse_script_line(raw)
        if parsed is None:
            continue
        op, arg = parsed
        try:
            if op == "all":
                transcript.append(f"> all: {arg}")
                for rank, response in session.broadcast(str(arg), timeout).items():
                    record_response(rank, response)
            elif op == "rank":
                rank, cmd = arg  # type: ignore[misc]
                transcript.append(f"> rank {rank}: {cmd}")
                record_response(rank, session.command(rank, cmd, timeout))
            elif op == "wait-hits":
                transcript.append(f"> wait-hits {arg}")
                hits = session.wait_hits(int(arg), timeout)  # type: ignore[arg-type]
                for event in sorted(hits, key=lambda e: (e.rank, e.ts)):
                    transcript.append(f"[rank {event.rank}] {event.line()}")
            elif op == "wait-exit":
                transcript.append("> wait-exit")
                session.wait_exit(timeout)
                transcript.append("# all ranks closed")
        except ScriptError as exc:
            raise ScriptError(str(exc), transcript) from None
    return transcript


# -- CLI -----------------------------------------------------------------------


def _repl(session: Session) -> int:
    print("mpxdbg: commands are script lines (all: CMD | rank N: CMD | "
          "wait-hits K | wait-exit); quit to leave")
    while True:
        try:
            line = input("mpxdbg> ")
        except EOFError:
            return 0
        if line.strip() in ("quit", "exit"):
            return 0
        try:
            for entry in run_script(session, [line]):
                print(entry)
        except ScriptError as exc:
            for entry in exc.transcript:
                print(entry)
            print(f"error: {exc}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="mpxdbg", add_help=True)
    parser.add_argument("-conf", required=True)
    parser.add_argument("--script", default=None)
    parser.add_argument("--gateway", type=int, default=None)
    parser.add_argument("--static-dir", default=None)
    parser.add_argument("--timeout", type=float, default=DEFAULT_WAIT_TIMEOUT_S)
    try:
        ns = parser.parse_args(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as exc:
        return int(exc.code or 2)
    try:
        conf = read_conf(ns.conf)
        session = attach_all(conf)
    except Exception as exc:
        print(f"mpxdbg: {exc}", file=sys.stderr)
        return 1
    try:
        if ns.script:
            try:
                script = Path(ns.script).read_text(encoding="utf-8").splitlines()
            except OSError as exc:
                print(f"mpxdbg: {exc}", file=sys.stderr)
                return 2
            try:
                for line in run_script(session, script, timeout=ns.timeout):
                    print(line)
                return 0
            except ScriptError as exc:
                for line in exc.transcript:
                    print(line)
                print(f"mpxdbg: {exc}", file=sys.stderr)
                return 1
        if ns.gateway is not None:
            from .gateway import serve_gateway

            server = serve_gateway(session, ns.gateway, static_dir=ns.static_dir)
            print(f"mpxdbg: gateway at http://127.0.0.1:{server.port}/", flush=True)
            try:
                while True:
                    time.sleep(0.5)
            except KeyboardInterrupt:
                return 0
            finally:
                server.stop()
        return _repl(session)
    finally:
        session.close()


if __name__ == "__main__":
    sys.exit(main())
