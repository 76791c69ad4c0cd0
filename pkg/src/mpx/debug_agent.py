"""In-process cooperative debug server (MDWP).

One agent serves one rank over a newline-delimited UTF-8 text protocol,
one client at a time. Application threads stop only inside probe
checkpoints; there is no preemption. Client commands:

    HELLO | THREADS | BREAK <name> | CLEAR <name> | SUSPEND |
    RESUME [<thread>] | STEP <thread> | STACK <thread> |
    INSPECT <name> | DETACH

Server lines: ``OK [payload]``, ``ERR <code>``, ``EVT <kind> <args...>``,
``THREAD <id> <state>``, ``FRAME <name>``. Multi-line responses (THREADS,
STACK) put the continuation line count in the OK payload so a client can
read them without guessing. Breakpoints fire on enter events only; a
stepping thread stops at its next probe event of either kind.
"""
from __future__ import annotations

import errno
import queue
import socket
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import ConfigError, PortInUseError

RUNNING = "RUNNING"
SUSPEND_REQUESTED = "SUSPEND_REQUESTED"
SUSPENDED = "SUSPENDED"
STEPPING = "STEPPING"

ADDRESS_IN_USE = "address already in use"

# resolver(name) -> (provider, owner_thread_ident) or None
InspectResolver = Callable[[str], Optional[tuple[Callable[[], object], int]]]


@dataclass(frozen=True)
class AgentOptions:
    port: int
    suspend_on_start: bool = False
    server: bool = True

    def validate(self) -> None:
        if not 1024 <= self.port <= 65535:
            raise ConfigError(f"debug port {self.port} outside [1024, 65535]")
        if not self.server:
            raise ConfigError("connect-out agents are not supported; server only")


class _ThreadInfo:
    __slots__ = ("tid", "ident", "state", "stack")

    def __init__(self, tid: int, ident: int, state: str):
        self.tid = tid
        self.ident = ident
        self.state = state
        self.stack: list[str] = []


class DebugController:
    """The MDWP state machine, independent of sockets.

    execute() maps one command line to response lines and state changes;
    checkpoint() is called by application threads and blocks them while
    their state is SUSPENDED. EVT lines go to the emit callback.
    """

    def __init__(
        self,
        rank: int,
        size: int,
        *,
        suspend_on_start: bool = False,
        inspect_resolver: Optional[InspectResolver] = None,
        emit: Optional[Callable[[str], None]] = None,
    ):
        self.rank = rank
        self.size = size
        self.suspend_on_start = suspend_on_start
        self.inspect_resolver = inspect_resolver
        self._emit = emit if emit is not None else (lambda line: None)
        self._cond = threading.Condition()
        self._threads: dict[int, _ThreadInfo] = {}
        self._by_ident: dict[int, _ThreadInfo] = {}
        self.breakpoints: set[str] = set()

    # -- thread registry ---------------------------------------------------

    def register_thread(self, ident: int) -> int:
        with self._cond:
            return self._ensure(ident).tid

    def _ensure(self, ident: int) -> _ThreadInfo:
        info = self._by_ident.get(ident)
        if info is None:
            initial = SUSPEND_REQUESTED if self.suspend_on_start else RUNNING
            info = _ThreadInfo(len(self._threads), ident, initial)
            self._threads[info.tid] = info
            self._by_ident[ident] = info
        return info

    def thread_states(self) -> dict[int, str]:
        with self._cond:
            return {tid: info.state for tid, info in self._threads.items()}

    # -- checkpoint, called on application threads --------------------------

    def checkpoint(self, site) -> None:
        with self._cond:
            info = self._ensure(site.thread)
            if site.kind == "enter":
                info.stack.append(site.name)
            hit = site.kind == "enter" and site.name in self.breakpoints
            if hit:
                info.state = SUSPENDED
                self._emit(f"EVT HIT {site.name} {info.tid} {site.kind}")
            elif info.state in (SUSPEND_REQUESTED, STEPPING):
                info.state = SUSPENDED
                self._emit(f"EVT SUSPENDED {info.tid}")
            if info.state == SUSPENDED:
                self._cond.notify_all()
                while info.state == SUSPENDED:
                    self._cond.wait()
            if site.kind == "exit" and info.stack:
                info.stack.pop()

    # -- command execution ---------------------------------------------------

    def execute(self, line: str) -> list[str]:
        line = line.rstrip("\r\n")
        if not line.strip():
            return ["ERR parse"]
        parts = line.split(" ")
        cmd = parts[0]
        with self._cond:
            if cmd == "HELLO" and len(parts) == 1:
                return [f"OK rank {self.rank} size {self.size}"]
            if cmd == "THREADS" and len(parts) == 1:
                rows = [
                    f"THREAD {tid} {self._threads[tid].state}"
                    for tid in sorted(self._threads)
                ]
                return [f"OK {len(rows)}"] + rows
            if cmd in ("BREAK", "CLEAR"):
                name = line[len(cmd) + 1 :] if len(parts) >= 2 else ""
                if not name.strip():
                    return ["ERR parse"]
                if cmd == "BREAK":
                    self.breakpoints.add(name)
                else:
                    self.breakpoints.discard(name)
                return ["OK"]
            if cmd == "SUSPEND" and len(parts) == 1:
                for info in self._threads.values():
                    if info.state == RUNNING:
                        info.state = SUSPEND_REQUESTED
                return ["OK"]
            if cmd == "RESUME" and len(parts) in (1, 2):
                if len(parts) == 2:
                    tid = self._parse_tid(parts[1])
                    if tid is None:
                        return ["ERR parse"]
                    targets = [self._threads[tid]] if tid in self._threads else []
                else:
                    targets = list(self._threads.values())
                self._release(targets, RUNNING)
                return ["OK"]
            if cmd == "STEP" and len(parts) == 2:
                tid = self._parse_tid(parts[1])
                if tid is None:
                    return ["ERR parse"]
                info = self._threads.get(tid)
                if info is None or info.state != SUSPENDED:
                    return ["ERR not-suspended"]
                self._release([info], STEPPING)
                return ["OK"]
            if cmd == "STACK" and len(parts) == 2:
                tid = self._parse_tid(parts[1])
                if tid is None:
                    return ["ERR parse"]
                info = self._threads.get(tid)
                if info is None or info.state != SUSPENDED:
                    return ["ERR not-suspended"]
                frames = [f"FRAME {name}" for name in reversed(info.stack)]
                return [f"OK {len(frames)}"] + frames
            if cmd == "INSPECT":
                name = line[len(cmd) + 1 :] if len(parts) >= 2 else ""
                if not name.strip():
                    return ["ERR parse"]
                return self._inspect(name)
            if cmd == "DETACH" and len(parts) == 1:
                self._detach_locked()
                return ["OK"]
            return ["ERR parse"]

    def _parse_tid(self, token: str) -> Optional[int]:
        try:
            return int(token)
        except ValueError:
            return None

    def _release(self, targets: list[_ThreadInfo], new_state: str) -> None:
        for info in targets:
            info.state = new_state
        self._cond.notify_all()

    def _inspect(self, name: str) -> list[str]:
        resolver = self.inspect_resolver
        entry = resolver(name) if resolver is not None else None
        if entry is None:
            return ["ERR unknown-inspectable"]
        provider, owner_ident = entry
        owner = self._by_ident.get(owner_ident)
        if owner is None or owner.state != SUSPENDED:
            return ["ERR not-suspended"]
        try:
            value = str(provider())
        except Exception:
            return ["ERR inspect-failed"]
        return ["OK " + " ".join(value.splitlines())]

    def _detach_locked(self) -> None:
        self.breakpoints.clear()
        self._release(list(self._threads.values()), RUNNING)

    def detach(self) -> None:
        with self._cond:
            self._detach_locked()


class _Shutdown:
    pass


_CLOSE = _Shutdown()


class DebugAgent:
    """TCP front end for one rank's DebugController."""

    def __init__(
        self,
        rank: int,
        size: int,
        options: AgentOptions,
        inspect_resolver: Optional[InspectResolver] = None,
    ):
        options.validate()
        self.options = options
        self.controller = DebugController(
            rank,
            size,
            suspend_on_start=options.suspend_on_start,
            inspect_resolver=inspect_resolver,
            emit=self._emit_event,
        )
        # The rank's main thread is known before it runs; registering it now
        # means an early RESUME (client attached before the thread started)
        # cancels the pending suspend instead of releasing an empty set.
        self.controller.register_thread(rank)
        self._listener: Optional[socket.socket] = None
        self._outbox: list[str] = []
        self._wq: Optional[queue.SimpleQueue] = None
        self._out_lock = threading.Lock()
        self._client_conn: Optional[socket.socket] = None
        self._serve_thread: Optional[threading.Thread] = None
        self._shutdown = False

    @property
    def port(self) -> int:
        assert self._listener is not None, "agent not started"
        return self._listener.getsockname()[1]

    def adopt_context(self, ctx) -> None:
        """Serve a rank context: its inspectables and its calling thread.

        Threads are keyed by the same logical id probe sites carry (the
        rank for rank threads), not the recyclable OS ident.
        """
        self.controller.inspect_resolver = ctx.inspectable
        self.controller.register_thread(ctx.rank)

    def checkpoint(self, site) -> None:
        """Probe hook: may block the calling thread while it is suspended."""
        self.controller.checkpoint(site)

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(("", self.options.port))
        except OSError as exc:
            sock.close()
            if exc.errno == errno.EADDRINUSE:
                raise PortInUseError(
                    f"{ADDRESS_IN_USE}: debug port {self.options.port}"
                ) from exc
            raise
        sock.listen()
        self._listener = sock
        threading.Thread(
            target=self._accept_loop,
            name=f"mpx-agent-{self.controller.rank}",
            daemon=True,
        ).start()

    def shutdown(self) -> None:
        self._shutdown = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._out_lock:
            conn = self._client_conn
            server = self._serve_thread
        if conn is not None:
            # Close only the read side: the serve loop finishes the request
            # it is answering, sees EOF, and then hands the writer its
            # sentinel, so queued responses still reach the client first.
            try:
                conn.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        if server is not None and server is not threading.current_thread():
            # The serve/writer pair are daemon threads; without this join a
            # finishing rank can let the process exit before the response to
            # the command that released it has been written out.
            server.join(timeout=5.0)

    # -- event plumbing ------------------------------------------------------

    def _emit_event(self, line: str) -> None:
        with self._out_lock:
            if self._wq is not None:
                self._wq.put(line)
            else:
                self._outbox.append(line)

    def _enqueue_response(self, lines: list[str]) -> None:
        with self._out_lock:
            if self._wq is not None:
                self._wq.put("\n".join(lines))

    # -- connection handling ---------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._shutdown:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            wq: queue.SimpleQueue = queue.SimpleQueue()
            with self._out_lock:
                busy = self._wq is not None
                if not busy:
                    # claim the client slot and hand over queued events
                    self._wq = wq
                    self._client_conn = conn
                    for line in self._outbox:
                        wq.put(line)
                    self._outbox.clear()
            if busy:
                try:
                    conn.sendall(b"ERR busy\n")
                except OSError:
                    pass
                finally:
                    conn.close()
                continue
            server = threading.Thread(
                target=self._serve, args=(conn, wq), daemon=True,
                name=f"mpx-agent-serve-{self.controller.rank}",
            )
            with self._out_lock:
                self._serve_thread = server
            server.start()

    def _serve(self, conn: socket.socket, wq: queue.SimpleQueue) -> None:
        writer = threading.Thread(
            target=self._writer, args=(conn, wq), daemon=True,
            name=f"mpx-agent-writer-{self.controller.rank}",
        )
        writer.start()
        detach = False
        try:
            rfile = conn.makefile("r", encoding="utf-8", newline="\n")
            for raw in rfile:
                line = raw.rstrip("\n")
                response = self.controller.execute(line)
                self._enqueue_response(response)
                if line.split(" ", 1)[0] == "DETACH" and response == ["OK"]:
                    detach = True
                    break
        except OSError:
            pass
        finally:
            if not detach:
                # client vanished: same cleanup as an explicit DETACH
                self.controller.detach()
            # _serve_thread stays set so a concurrent shutdown() still joins
            # us through the writer flush below; joining later is a no-op.
            with self._out_lock:
                self._wq = None
                self._client_conn = None
            wq.put(_CLOSE)
            writer.join(timeout=2.0)
            try:
                conn.close()
            except OSError:
                pass

    def _writer(self, conn: socket.socket, wq: queue.SimpleQueue) -> None:
        while True:
            item = wq.get()
            if item is _CLOSE:
                try:
                    conn.shutdown(socket.SHUT_WR)  # flushed; say goodbye
                except OSError:
                    pass
                return
            try:
                conn.sendall((item + "\n").encode("utf-8"))
            except OSError:
                return
