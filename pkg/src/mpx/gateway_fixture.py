"""Run a live debugged demo under the gateway, for console integration tests.

Spawns `mpx.launcher -np N -debug BASE ... mpx.demo compute`, attaches a
debug session once mpjdev.conf exists, serves the HTTP gateway on an
ephemeral port, and prints "PORT <n>". Shuts everything down when stdin
closes (the contract test harnesses rely on that) or on SIGTERM.
"""
from __future__ import annotations

import argparse
import signal
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from .conf import read_conf
from .debug_client import attach_all
from .gateway import serve_gateway


def find_debug_base(np: int, tries: int = 200) -> int:
    """Pick a base so agent ports base, base+2, ... are all bindable now."""
    import random

    rng = random.Random()
    for _ in range(tries):
        base = rng.randrange(15000, 45000, 2)
        socks = []
        try:
            for i in range(np):
                s = socket.socket()
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                s.bind(("127.0.0.1", base + 2 * i))
                socks.append(s)
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise RuntimeError("no free debug port range found")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mpx-gateway-fixture")
    parser.add_argument("-np", type=int, default=4)
    parser.add_argument("--iters", type=int, default=50)
    parser.add_argument("--static-dir", default=None)
    ns = parser.parse_args(sys.argv[1:] if argv is None else list(argv))

    signal.signal(signal.SIGTERM, lambda *_: sys.exit(1))
    workdir = Path(tempfile.mkdtemp(prefix="mpx-gateway-"))
    base = find_debug_base(ns.np)
    cmd = [
        sys.executable,
        "-m",
        "mpx.launcher",
        "-np",
        str(ns.np),
        "-debug",
        str(base),
        "--env",
        "MPX_DEBUG_SUSPEND=1",
        "--",
        sys.executable,
        "-m",
        "mpx.demo",
        "compute",
        str(ns.iters),
    ]
    proc = subprocess.Popen(
        cmd, cwd=workdir, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL
    )
    session = None
    server = None
    try:
        conf_path = workdir / "mpjdev.conf"
        deadline = time.monotonic() + 15.0
        while not conf_path.exists():
            if proc.poll() is not None or time.monotonic() > deadline:
                print("fixture: launcher did not produce mpjdev.conf", file=sys.stderr)
                return 1
            time.sleep(0.02)
        session = attach_all(read_conf(conf_path))
        server = serve_gateway(session, 0, static_dir=ns.static_dir)
        print(f"PORT {server.port}", flush=True)
        # stay up until the parent closes our stdin or the run ends on its own
        while proc.poll() is None:
            if sys.stdin.closed or not _stdin_open():
                break
            time.sleep(0.1)
        return 0
    finally:
        if session is not None:
            session.close()
        if server is not None:
            server.stop()
        if proc.poll() is None:
            proc.kill()
            proc.wait()


def _stdin_open() -> bool:
    import select

    try:
        ready, _, _ = select.select([sys.stdin], [], [], 0)
    except (OSError, ValueError):
        return False
    if not ready:
        return True
    return bool(sys.stdin.buffer.peek(1)) if hasattr(sys.stdin, "buffer") else False


if __name__ == "__main__":
    sys.exit(main())
