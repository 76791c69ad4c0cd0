#!/usr/bin/env python3
"""Walk a scripted debug session over a 4-rank demo run.

Launches the demo suspended, attaches to every rank, sets a breakpoint,
waits for all ranks to hit it, shows a stack and an inspected value, then
resumes to completion and prints the whole transcript.

    python3 scripts/debug_demo.py
    python3 scripts/debug_demo.py --gateway   # pause suspended, serve the HTTP console
"""
from __future__ import annotations

import argparse
import subprocess
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mpx.conf import read_conf  # noqa: E402
from mpx.debug_client import attach_all, run_script  # noqa: E402
from mpx.gateway import serve_gateway  # noqa: E402
from mpx.gateway_fixture import find_debug_base  # noqa: E402

SUSPENDED_PHASE = [
    "all: BREAK compute",
    "all: RESUME",
    "wait-hits 4",
    "rank 0: STACK 0",
    "rank 0: INSPECT iter",
]

FINISH_PHASE = [
    "all: CLEAR compute",
    "all: RESUME",
    "wait-exit",
]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--np", type=int, default=4)
    parser.add_argument("--iters", type=int, default=50)
    parser.add_argument(
        "--gateway",
        action="store_true",
        help="serve the HTTP console while the ranks sit at the breakpoint",
    )
    parser.add_argument("--static-dir", default=None)
    ns = parser.parse_args(argv)

    workdir = Path(tempfile.mkdtemp(prefix="mpx-debug-demo-"))
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
    try:
        conf_path = workdir / "mpjdev.conf"
        deadline = time.monotonic() + 15.0
        while not conf_path.exists():
            if proc.poll() is not None or time.monotonic() > deadline:
                print("launcher did not come up", file=sys.stderr)
                return 1
            time.sleep(0.02)
        session = attach_all(read_conf(conf_path))

        script = [line for phase in (SUSPENDED_PHASE, FINISH_PHASE) for line in phase]
        if ns.gateway:
            for line in run_script(session, SUSPENDED_PHASE):
                print(line)
            server = serve_gateway(session, 0, static_dir=ns.static_dir)
            print(f"\nconsole at http://127.0.0.1:{server.port}/ "
                  "(ranks are suspended; press Enter to resume)\n")
            try:
                input()
            except (EOFError, KeyboardInterrupt):
                pass
            for line in run_script(session, FINISH_PHASE):
                print(line)
            server.stop()
        else:
            for line in run_script(session, script):
                print(line)
        return proc.wait(timeout=15)
    finally:
        if session is not None:
            session.close()
        if proc.poll() is None:
            proc.kill()
            proc.wait()


if __name__ == "__main__":
    sys.exit(main())
