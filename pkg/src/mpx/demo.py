"""Small rank programs used by the test suite and for kicking the tires.

Run under the launcher, e.g.:

    mpxrun -np 4 -debug 14000 -- python -m mpx.demo compute 5

Subcommands:

    compute [iters]   nested probes "main"/"compute", inspectable "iter"
    probes            fixed probe tree (for profile file checks)
    ring [seed]       digest token ring; one deterministic line per rank
    print             one stdout and one stderr line per rank
    exit CODE RANK    the given rank exits with CODE, the rest with 0
    signal RANK       the given rank kills its own process with SIGKILL
    sleep SECONDS     every rank sleeps (for watchdog tests)
"""
from __future__ import annotations

import hashlib
import os
import signal as signal_mod
import sys
import time

from . import harness
from .errors import UsageError

RING_TAG = 5


def compute(ctx, iters: int) -> int:
    cell = {"iter": -1}
    ctx.register_inspectable("iter", lambda: cell["iter"])
    ctx.register_inspectable("rank", lambda: ctx.rank)

    def broken():
        raise RuntimeError("provider exploded")

    ctx.register_inspectable("boom", broken)
    acc = 0
    with harness.probe_scope("main"):
        for i in range(iters):
            cell["iter"] = i
            with harness.probe_scope("compute"):
                for j in range(2000):
                    acc = (acc + (i + 1) * j) % 1000003
    print(f"rank {ctx.rank} acc {acc}")
    return 0


def probes(ctx) -> int:
    with harness.probe_scope("main"):
        for _ in range(2):
            with harness.probe_scope("a"):
                with harness.probe_scope("b"):
                    pass
        with harness.probe_scope("c"):
            pass
    return 0


def ring(ctx, seed: int) -> int:
    right = (ctx.rank + 1) % ctx.size
    left = (ctx.rank - 1) % ctx.size
    value = f"{seed}:{ctx.rank}".encode()
    for _ in range(ctx.size):
        ctx.send(right, RING_TAG, value)
        incoming = ctx.recv(left, RING_TAG)
        value = hashlib.sha256(value + incoming).digest()
    ctx.barrier()
    print(f"rank {ctx.rank} digest {value.hex()[:16]}")
    return 0


def main_body(ctx, args: list[str]) -> int:
    if not args:
        raise UsageError("demo needs a subcommand")
    cmd, rest = args[0], args[1:]
    if cmd == "compute":
        return compute(ctx, int(rest[0]) if rest else 3)
    if cmd == "probes":
        return probes(ctx)
    if cmd == "ring":
        return ring(ctx, int(rest[0]) if rest else 1)
    if cmd == "print":
        print(f"out from rank {ctx.rank}")
        print(f"err from rank {ctx.rank}", file=sys.stderr)
        return 0
    if cmd == "exit":
        if len(rest) != 2:
            raise UsageError("usage: exit CODE RANK")
        code, target = int(rest[0]), int(rest[1])
        return code if ctx.rank == target else 0
    if cmd == "signal":
        if len(rest) != 1:
            raise UsageError("usage: signal RANK")
        if ctx.rank == int(rest[0]):
            os.kill(os.getpid(), signal_mod.SIGKILL)
        time.sleep(5)  # give the doomed process time to die first
        return 0
    if cmd == "sleep":
        time.sleep(float(rest[0]) if rest else 5.0)
        return 0
    raise UsageError(f"unknown demo subcommand {cmd!r}")


def main() -> int:
    return harness.run(main_body)


if __name__ == "__main__":
    sys.exit(main())
