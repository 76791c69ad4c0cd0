"""Minimal message-passing runtime with probe hooks.

Ranks run either as threads of one process (multicore) or as one process
per rank over TCP sockets (cluster). Point-to-point byte messages match
exactly on (source, tag) and are delivered FIFO per (source, dest, tag)
channel. probe_scope wraps a block in enter/exit events consumed by the
rank's debug agent (cooperative checkpoint) and by the process profiler.

Cluster wire format: a connection opens with a 4-byte big-endian rank
announcement, then carries frames of 4-byte big-endian tag, 4-byte
big-endian payload length, payload. Each rank's data listener binds the
port recorded for it in mpjdev.conf plus one; the stride-2 debug port
formula leaves that slot free on every host.
"""
from __future__ import annotations

import os
import queue
import socket
import struct
import sys
import threading
import time
import traceback
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

from . import profiler as _prof
from .conf import read_conf
from .errors import ConfigError, PortInUseError, StateError, TransportError

MAX_PAYLOAD = 2**31 - 1
MIN_TAG = -(2**31)
MAX_TAG = 2**31 - 1
BARRIER_TAG = MAX_TAG  # reserved for the internal barrier protocol
DATA_PORT_OFFSET = 1
DEFAULT_CONNECT_TIMEOUT_S = 30.0
DEFAULT_QUEUE_CAPACITY = 1024

_FRAME_HEADER = struct.Struct(">iI")
_RANK_HELLO = struct.Struct(">I")


class Mode(Enum):
    MULTICORE = "multicore"
    CLUSTER = "cluster"


def now_us() -> int:
    return time.monotonic_ns() // 1000


@dataclass(frozen=True)
class ProbeSite:
    name: str
    kind: str  # "enter" | "exit"
    thread: int
    timestamp: int


class _Closed:
    """Sentinel queued behind the last message of a closed peer."""


_CLOSED = _Closed()


class _MulticoreTransport:
    def __init__(self, group: "MulticoreGroup", rank: int):
        self._group = group
        self._rank = rank

    @property
    def bound_port(self) -> Optional[int]:
        return None

    def send(self, dest: int, tag: int, payload: bytes) -> None:
        self._group.channel(self._rank, dest, tag).put(payload)

    def recv(self, src: int, tag: int) -> bytes:
        item = self._group.channel(src, self._rank, tag).get()
        if item is _CLOSED:
            raise TransportError(f"rank {src} closed before a matching message")
        return item

    def close(self) -> None:
        pass


class MulticoreGroup:
    """Shared bounded channel table for the rank threads of one process."""

    def __init__(self, size: int, queue_capacity: int = DEFAULT_QUEUE_CAPACITY):
        if size < 1:
            raise ConfigError(f"group size must be >= 1, got {size}")
        self.size = size
        self._capacity = queue_capacity
        self._channels: dict[tuple[int, int, int], queue.Queue] = {}
        self._lock = threading.Lock()
        self._claimed: set[int] = set()

    def channel(self, src: int, dest: int, tag: int) -> queue.Queue:
        key = (src, dest, tag)
        q = self._channels.get(key)
        if q is None:
            with self._lock:
                q = self._channels.get(key)
                if q is None:
                    q = self._channels[key] = queue.Queue(self._capacity)
        return q

    def context(self, rank: int) -> "CommContext":
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} out of range for size {self.size}")
        with self._lock:
            if rank in self._claimed:
                raise ConfigError(f"rank {rank} already claimed in this group")
            self._claimed.add(rank)
        return CommContext(rank, self.size, Mode.MULTICORE, _MulticoreTransport(self, rank))


class _ClusterTransport:
    def __init__(self, rank: int, records, timeout_s: float):
        self._rank = rank
        self._records = {rec.rank: rec for rec in records}
        self._timeout = timeout_s
        self._inboxes: dict[tuple[int, int], queue.SimpleQueue] = {}
        self._inbox_lock = threading.Lock()
        self._closed_srcs: set[int] = set()
        self._out: dict[int, socket.socket] = {}
        self._out_lock = threading.Lock()
        self._shutdown = False
        port = self._records[rank].debug_port + DATA_PORT_OFFSET
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind(("", port))
        except OSError as exc:
            self._listener.close()
            raise TransportError(f"cannot bind data port {port}: {exc}") from exc
        self._listener.listen()
        self._acceptor = threading.Thread(
            target=self._accept_loop, name=f"mpx-accept-{rank}", daemon=True
        )
        self._acceptor.start()

    @property
    def bound_port(self) -> int:
        return self._listener.getsockname()[1]

    def _inbox(self, src: int, tag: int) -> queue.SimpleQueue:
        key = (src, tag)
        q = self._inboxes.get(key)
        if q is None:
            with self._inbox_lock:
                q = self._inboxes.get(key)
                if q is None:
                    q = self._inboxes[key] = queue.SimpleQueue()
        return q

    def _accept_loop(self) -> None:
        while not self._shutdown:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._reader, args=(conn,), daemon=True,
                name=f"mpx-reader-{self._rank}",
            ).start()

    def _read_exact(self, conn: socket.socket, n: int) -> Optional[bytes]:
        buf = b""
        while len(buf) < n:
            chunk = conn.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def _reader(self, conn: socket.socket) -> None:
        src = None
        try:
            hello = self._read_exact(conn, _RANK_HELLO.size)
            if hello is None:
                return
            (src,) = _RANK_HELLO.unpack(hello)
            while True:
                header = self._read_exact(conn, _FRAME_HEADER.size)
                if header is None:
                    break
                tag, length = _FRAME_HEADER.unpack(header)
                payload = self._read_exact(conn, length) if length else b""
                if payload is None:
                    break
                self._inbox(src, tag).put(payload)
        except OSError:
            pass
        finally:
            conn.close()
            if src is not None:
                with self._inbox_lock:
                    self._closed_srcs.add(src)
                    queues = [q for (s, _), q in self._inboxes.items() if s == src]
                for q in queues:
                    q.put(_CLOSED)

    def _connect(self, dest: int) -> socket.socket:
        with self._out_lock:
            sock = self._out.get(dest)
        if sock is not None:
            return sock
        rec = self._records[dest]
        target = (rec.address, rec.debug_port + DATA_PORT_OFFSET)
        deadline = time.monotonic() + self._timeout
        last_error: Optional[Exception] = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(target, timeout=self._timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(_RANK_HELLO.pack(self._rank))
                break
            except OSError as exc:
                last_error = exc
                time.sleep(0.05)
        else:
            raise TransportError(
                f"rank {self._rank}: cannot reach rank {dest} at "
                f"{target[0]}:{target[1]} within {self._timeout:.0f}s: {last_error}"
            )
        with self._out_lock:
            existing = self._out.get(dest)
            if existing is not None:
                sock.close()
                return existing
            self._out[dest] = sock
        return sock

    def send(self, dest: int, tag: int, payload: bytes) -> None:
        if dest == self._rank:
            self._inbox(dest, tag).put(payload)
            return
        sock = self._connect(dest)
        try:
            sock.sendall(_FRAME_HEADER.pack(tag, len(payload)) + payload)
        except OSError as exc:
            raise TransportError(f"rank {self._rank}: send to rank {dest} failed: {exc}") from exc

    def recv(self, src: int, tag: int) -> bytes:
        q = self._inbox(src, tag)
        with self._inbox_lock:
            closed = src in self._closed_srcs
        if closed and q.empty():
            raise TransportError(f"rank {src} closed before a matching message")
        item = q.get()
        if item is _CLOSED:
            raise TransportError(f"rank {src} closed before a matching message")
        return item

    def close(self) -> None:
        self._shutdown = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._out_lock:
            socks = list(self._out.values())
            self._out.clear()
        for sock in socks:
            try:
                sock.close()
            except OSError:
                pass


class CommContext:
    """Per-rank communication handle; owned by exactly one thread."""

    def __init__(self, rank: int, size: int, mode: Mode, transport):
        self.rank = rank
        self.size = size
        self.mode = mode
        self._transport = transport
        self._finalized = False
        self.agent = None  # attached by the run() wrapper in debug mode
        self._inspectables: dict[str, tuple[Callable[[], object], int]] = {}

    @property
    def data_port(self) -> Optional[int]:
        return self._transport.bound_port

    def _check_open(self) -> None:
        if self._finalized:
            raise StateError(f"rank {self.rank}: context is finalized")

    def _check_peer(self, who: str, peer: int) -> None:
        if not isinstance(peer, int) or not 0 <= peer < self.size:
            raise ValueError(f"{who} {peer} out of range for size {self.size}")

    def _check_tag(self, tag: int) -> None:
        if not isinstance(tag, int) or not MIN_TAG <= tag <= MAX_TAG:
            raise ValueError(f"tag {tag} does not fit in 32 bits")

    def send(self, dest: int, tag: int, payload: bytes) -> None:
        """Block until the payload is handed to the transport."""
        self._check_open()
        self._check_peer("dest", dest)
        self._check_tag(tag)
        data = bytes(payload)
        if len(data) > MAX_PAYLOAD:
            raise ValueError(f"payload of {len(data)} bytes exceeds {MAX_PAYLOAD}")
        self._transport.send(dest, tag, data)

    def recv(self, src: int, tag: int) -> bytes:
        """Block until a message from src with this exact tag arrives."""
        self._check_open()
        self._check_peer("src", src)
        self._check_tag(tag)
        return self._transport.recv(src, tag)

    def barrier(self) -> None:
        """Linear barrier: gather at rank 0, then a release fan-out."""
        self._check_open()
        if self.size == 1:
            return
        if self.rank == 0:
            for peer in range(1, self.size):
                self._transport.recv(peer, BARRIER_TAG)
            for peer in range(1, self.size):
                self._transport.send(peer, BARRIER_TAG, b"")
        else:
            self._transport.send(0, BARRIER_TAG, b"")
            self._transport.recv(0, BARRIER_TAG)

    def register_inspectable(self, name: str, provider: Callable[[], object]) -> None:
        """Expose provider() to the debugger while this thread is suspended."""
        self._check_open()
        if not name or " " in name:
            raise ValueError(f"bad inspectable name {name!r}")
        if name in self._inspectables:
            raise ValueError(f"inspectable {name!r} already registered")
        # owner key matches the probe-site key for this rank's thread
        self._inspectables[name] = (provider, self.rank)

    def inspectable(self, name: str) -> Optional[tuple[Callable[[], object], int]]:
        return self._inspectables.get(name)

    def activate(self) -> None:
        """Bind this context to the calling thread for probe dispatch."""
        _tls.ctx = self

    def finalize(self) -> None:
        if self._finalized:
            return
        self._finalized = True
        self._transport.close()
        if getattr(_tls, "ctx", None) is self:
            _tls.ctx = None


_tls = threading.local()


def current_context() -> Optional[CommContext]:
    return getattr(_tls, "ctx", None)


@contextmanager
def probe_scope(name: str):
    """Wrap a block in enter/exit probe events.

    Order at enter is checkpoint, then profiler; at exit profiler, then
    checkpoint. Time spent suspended at a breakpoint therefore never
    lands in the probed function itself, only in its parent.
    """
    if not name or not isinstance(name, str):
        raise ValueError("probe name must be a non-empty string")
    ctx = current_context()
    agent = ctx.agent if ctx is not None else None
    prof = _prof.current()
    # Logical thread key: the rank for rank threads (stable even though the
    # OS recycles idents of exited threads), raw ident otherwise.
    ident = ctx.rank if ctx is not None else threading.get_ident()
    if agent is not None:
        agent.checkpoint(ProbeSite(name, "enter", ident, now_us()))
    if prof is not None:
        prof.on_event(ProbeSite(name, "enter", ident, now_us()))
    try:
        yield
    finally:
        if prof is not None:
            prof.on_event(ProbeSite(name, "exit", ident, now_us()))
        if agent is not None:
            agent.checkpoint(ProbeSite(name, "exit", ident, now_us()))


def register_inspectable(name: str, provider: Callable[[], object]) -> None:
    ctx = current_context()
    if ctx is None:
        raise StateError("no active context on this thread")
    ctx.register_inspectable(name, provider)


def _require(env: Mapping[str, str], key: str) -> str:
    value = env.get(key)
    if value is None or value == "":
        raise ConfigError(f"missing {key}")
    return value


def _int_env(env: Mapping[str, str], key: str) -> int:
    raw = _require(env, key)
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"bad {key}: {raw!r}") from None


def init(
    environment: Optional[Mapping[str, str]] = None,
    *,
    group: Optional[MulticoreGroup] = None,
) -> CommContext:
    """Build this rank's context from MPX_* variables and bind it here.

    Cluster mode reads mpjdev.conf (MPX_CONF) and binds the data listener
    next to the port recorded for this rank.
    """
    env = os.environ if environment is None else environment
    rank = _int_env(env, "MPX_RANK")
    size = _int_env(env, "MPX_SIZE")
    mode_raw = env.get("MPX_MODE", Mode.MULTICORE.value)
    try:
        mode = Mode(mode_raw)
    except ValueError:
        raise ConfigError(f"bad MPX_MODE: {mode_raw!r}") from None
    if size < 1:
        raise ConfigError(f"MPX_SIZE must be >= 1, got {size}")
    if not 0 <= rank < size:
        raise ConfigError(f"MPX_RANK {rank} out of range for MPX_SIZE {size}")
    if mode is Mode.MULTICORE:
        g = group if group is not None else MulticoreGroup(size)
        if g.size != size:
            raise ConfigError(f"group size {g.size} != MPX_SIZE {size}")
        ctx = g.context(rank)
    else:
        conf = read_conf(_require(env, "MPX_CONF"))
        if conf.np != size:
            raise ConfigError(f"conf lists {conf.np} ranks, MPX_SIZE is {size}")
        timeout_raw = env.get("MPX_CONNECT_TIMEOUT_S", "")
        try:
            timeout = float(timeout_raw) if timeout_raw else DEFAULT_CONNECT_TIMEOUT_S
        except ValueError:
            raise ConfigError(f"bad MPX_CONNECT_TIMEOUT_S: {timeout_raw!r}") from None
        ctx = CommContext(rank, size, mode, _ClusterTransport(rank, conf.records, timeout))
    ctx.activate()
    return ctx


MainFn = Callable[[CommContext, list[str]], Optional[int]]


def _start_agent(env: Mapping[str, str], rank: int, size: int, port: int):
    from .debug_agent import AgentOptions, DebugAgent

    options = AgentOptions(port=port, suspend_on_start=env.get("MPX_DEBUG_SUSPEND") == "1")
    agent = DebugAgent(rank, size, options)
    agent.start()
    return agent


def _run_rank(main: MainFn, ctx: CommContext, agent, args: list[str]) -> int:
    ctx.activate()
    ctx.agent = agent
    if agent is not None:
        agent.adopt_context(ctx)
    try:
        result = main(ctx, list(args))
        return 0 if result is None else int(result)
    finally:
        ctx.finalize()
        if agent is not None:
            agent.shutdown()


def _run_cluster(main: MainFn, args: list[str], env: Mapping[str, str], prof) -> int:
    rank = _int_env(env, "MPX_RANK")
    size = _int_env(env, "MPX_SIZE")
    agent = None
    port_raw = env.get("MPX_DEBUG_PORT")
    if port_raw:
        try:
            agent = _start_agent(env, rank, size, int(port_raw))
        except PortInUseError as exc:
            print(f"mpx: rank {rank}: {exc}", file=sys.stderr, flush=True)
            return 1
    try:
        ctx = init(env)
    except Exception as exc:
        print(f"mpx: rank {rank}: {exc}", file=sys.stderr, flush=True)
        if agent is not None:
            agent.shutdown()
        return 1
    try:
        rc = _run_rank(main, ctx, agent, args)
    except Exception:
        traceback.print_exc()
        rc = 1
    finally:
        if prof.enabled:
            prof.flush()
    return rc


def _run_multicore(main: MainFn, args: list[str], env: Mapping[str, str], prof) -> int:
    size_raw = env.get("MPX_SIZE", "1")
    try:
        size = int(size_raw)
    except ValueError:
        raise ConfigError(f"bad MPX_SIZE: {size_raw!r}") from None
    if size < 1:
        raise ConfigError(f"MPX_SIZE must be >= 1, got {size}")
    base_raw = env.get("MPX_DEBUG_PORT")
    base = int(base_raw) if base_raw else None
    group = MulticoreGroup(size)
    failures: dict[int, str] = {}
    fail_lock = threading.Lock()

    def rank_body(rank: int) -> None:
        agent = None
        try:
            if base is not None:
                # single node: local index equals rank
                agent = _start_agent(env, rank, size, base + 2 * rank)
            ctx = group.context(rank)
            rc = _run_rank(main, ctx, agent, args)
            if rc != 0:
                with fail_lock:
                    failures[rank] = f"exit code {rc}"
        except PortInUseError as exc:
            print(f"[rank {rank}] mpx: {exc}", file=sys.stderr, flush=True)
            with fail_lock:
                failures[rank] = str(exc)
        except Exception as exc:
            traceback.print_exc()
            print(f"[rank {rank}] mpx: {exc}", file=sys.stderr, flush=True)
            with fail_lock:
                failures[rank] = str(exc)

    threads = [
        threading.Thread(target=rank_body, args=(r,), name=f"mpx-rank-{r}")
        for r in range(size)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if prof.enabled:
        prof.flush()
    return 1 if failures else 0


def run(main: MainFn, environment: Optional[Mapping[str, str]] = None) -> int:
    """Program entry point for ranks started by the launcher.

    Cluster processes carry their rank in MPX_RANK; a multicore process
    has no MPX_RANK of its own and runs MPX_SIZE rank threads instead.
    Returns the process exit code.
    """
    env = os.environ if environment is None else environment
    args = sys.argv[1:]
    prof = _prof.enable(env)
    mode = env.get("MPX_MODE", Mode.MULTICORE.value)
    if mode == Mode.CLUSTER.value:
        return _run_cluster(main, args, env, prof)
    return _run_multicore(main, args, env, prof)
