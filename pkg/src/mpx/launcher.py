"""mpxrun: rank placement, debug ports, mpjdev.conf, process control.

Placement fills machines in blocks: with c = ceil(np / m), node i holds
ranks [i*c, min((i+1)*c, np)), so earlier nodes carry the extra ranks
when np does not divide evenly. A rank's debug port is
base + 2 * local_index; equal local indices on different nodes share a
port number on purpose. When several machine entries resolve to the same
address (a desk-scale "cluster" on localhost), each later entry's ports
are shifted by 100 per shared slot, and the conf file records those
effective ports; the conf file is always the source of truth.

The conf file is written before any rank process starts. Child
environment: MPX_RANK (cluster), MPX_SIZE, MPX_MODE, MPX_CONF,
MPX_DEBUG_PORT (debug mode), MPX_PROFILE/MPX_TRACE/MPX_PROF_DIR and
MPX_PROF_NODE=rank (profile mode, cluster).
"""
from __future__ import annotations

import argparse
import math
import os
import shlex
import socket
import subprocess
import sys
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Optional, Sequence

from .conf import ConfFile, ConfRecord, write_conf_file
from .errors import ConfigError, LaunchError, UsageError

DEFAULT_PORT_BASE = 14000  # conf ports for cluster runs launched without -debug
HOST_SLOT_STRIDE = 100
MULTICORE_LABEL = "*"

USAGE = (
    "mpxrun -np N [-dev multicore|cluster] [-machines FILE] [-debug PORT]\n"
    "       [-profile] [-trace] [-profdir DIR] [--env K=V]... -- PROGRAM [ARGS...]"
)


@dataclass(frozen=True)
class LaunchConfig:
    np: int
    mode: str = "multicore"
    machines: tuple[str, ...] = ()
    debug_port_base: Optional[int] = None
    profile: bool = False
    trace: bool = False
    profile_dir: str = "."
    program: tuple[str, ...] = ()
    extra_env: tuple[tuple[str, str], ...] = ()
    remote_exec: Optional[str] = None  # e.g. "ssh {address} {command}"


@dataclass(frozen=True)
class PlacementEntry:
    rank: int
    node: str
    node_index: int
    local_index: int
    debug_port: Optional[int] = None


@dataclass(frozen=True)
class Placement:
    entries: tuple[PlacementEntry, ...]

    def entry_for(self, rank: int) -> PlacementEntry:
        return self.entries[rank]

    def nodes(self) -> list[tuple[int, str]]:
        """Machine slots in file order: (node_index, address). Repeated
        addresses stay distinct slots."""
        seen: dict[int, str] = {}
        for e in self.entries:
            seen.setdefault(e.node_index, e.node)
        return sorted(seen.items())


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would sys.exit(2)
        raise UsageError(message)


def read_machines(path: str | Path) -> tuple[str, ...]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read machines file {path}: {exc}") from exc
    machines = tuple(
        line.strip() for line in lines if line.strip() and not line.strip().startswith("#")
    )
    if not machines:
        raise UsageError(f"machines file {path} lists no machines")
    return machines


def parse_cli(argv: Sequence[str]) -> LaunchConfig:
    argv = list(argv)
    if "--" in argv:
        split = argv.index("--")
        head, program = argv[:split], argv[split + 1 :]
    else:
        head, program = argv, []
    if not program:
        raise UsageError("missing -- PROGRAM [ARGS...]")

    parser = _Parser(prog="mpxrun", usage=USAGE, add_help=False, allow_abbrev=False)
    parser.add_argument("-np", type=int, required=True)
    parser.add_argument("-dev", choices=("multicore", "cluster"), default="multicore")
    parser.add_argument("-machines", default=None)
    parser.add_argument("-debug", type=int, default=None)
    parser.add_argument("-profile", action="store_true")
    parser.add_argument("-trace", action="store_true")
    parser.add_argument("-profdir", default=".")
    parser.add_argument("--env", action="append", default=[])
    try:
        ns = parser.parse_args(head)
    except argparse.ArgumentError as exc:
        raise UsageError(str(exc)) from None

    if ns.np < 1:
        raise UsageError(f"-np must be >= 1, got {ns.np}")
    machines: tuple[str, ...] = ()
    if ns.dev == "cluster":
        if ns.machines is None:
            raise UsageError("-dev cluster requires -machines FILE")
        machines = read_machines(ns.machines)
    elif ns.machines is not None:
        raise UsageError("-machines applies only to -dev cluster")
    if ns.debug is not None:
        top = ns.debug + 2 * (ns.np - 1)
        if not 1024 <= ns.debug or top > 65535:
            raise UsageError(
                f"-debug {ns.debug} leaves no room for {ns.np} ranks (ports must stay in [1024, 65535])"
            )
    extra: list[tuple[str, str]] = []
    for item in ns.env:
        if "=" not in item:
            raise UsageError(f"--env expects K=V, got {item!r}")
        key, value = item.split("=", 1)
        if not key:
            raise UsageError(f"--env expects K=V, got {item!r}")
        extra.append((key, value))

    return LaunchConfig(
        np=ns.np,
        mode=ns.dev,
        machines=machines,
        debug_port_base=ns.debug,
        profile=ns.profile,
        trace=ns.trace,
        profile_dir=ns.profdir,
        program=tuple(program),
        extra_env=tuple(extra),
        remote_exec=os.environ.get("MPX_REMOTE_EXEC") or None,
    )


def assign_ranks(machines: Sequence[str], np: int) -> Placement:
    """Block placement: node i holds ranks [i*c, (i+1)*c) with c = ceil(np/m)."""
    if np < 1:
        raise ConfigError(f"np must be >= 1, got {np}")
    if not machines:
        raise ConfigError("no machines to place ranks on")
    c = math.ceil(np / len(machines))
    entries = []
    for rank in range(np):
        node_index = rank // c
        entries.append(
            PlacementEntry(rank, machines[node_index], node_index, rank - node_index * c)
        )
    return Placement(tuple(entries))


def compute_debug_port(base: int, local_index: int) -> int:
    """Stride-2 port schedule: base + 2 * local_index."""
    if local_index < 0:
        raise ConfigError(f"local index must be >= 0, got {local_index}")
    port = base + 2 * local_index
    if not 0 <= port <= 65535:
        raise ConfigError(f"debug port {port} out of range (base {base}, index {local_index})")
    return port


def assign_ports(placement: Placement, base: int) -> Placement:
    entries = tuple(
        replace(e, debug_port=compute_debug_port(base, e.local_index))
        for e in placement.entries
    )
    return Placement(entries)


def _resolve(address: str, cache: dict[str, str]) -> str:
    if address not in cache:
        try:
            cache[address] = socket.gethostbyname(address)
        except OSError:
            cache[address] = address
    return cache[address]


def apply_host_offsets(placement: Placement) -> Placement:
    """Shift ports of machine entries that share a resolved address.

    Slot k of an address gets +100*k on every port, so desk-scale runs
    with repeated localhost entries cannot collide. Distinct addresses
    come through untouched.
    """
    cache: dict[str, str] = {}
    slots: dict[str, int] = {}
    node_offset: dict[int, int] = {}
    for node_index, address in placement.nodes():
        resolved = _resolve(address, cache)
        slot = slots.get(resolved, 0)
        slots[resolved] = slot + 1
        node_offset[node_index] = HOST_SLOT_STRIDE * slot
    entries = []
    for e in placement.entries:
        offset = node_offset[e.node_index]
        if offset and e.debug_port is not None:
            port = e.debug_port + offset
            if port > 65535:
                raise ConfigError(f"rank {e.rank}: offset port {port} out of range")
            entries.append(replace(e, debug_port=port))
        else:
            entries.append(e)
    return Placement(tuple(entries))


def write_conf(placement: Placement, path: str | Path) -> ConfFile:
    records = []
    for e in placement.entries:
        if e.debug_port is None:
            raise ConfigError(f"rank {e.rank} has no port assigned")
        records.append(ConfRecord(e.node, e.rank, e.debug_port))
    return write_conf_file(records, path)


@dataclass
class RankProcess:
    label: str  # rank number as text, or "*" for the one multicore process
    proc: subprocess.Popen


@dataclass
class ProcessSet:
    mode: str
    np: int
    procs: list[RankProcess]
    placement: Placement
    conf_path: Optional[Path]


@dataclass(frozen=True)
class RankOutcome:
    exit_code: Optional[int]
    term_signal: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


@dataclass
class ExitReport:
    outcomes: dict[int, RankOutcome]
    stdout: dict[str, list[str]]
    stderr: dict[str, list[str]]

    @property
    def exit_code(self) -> int:
        return 0 if all(o.ok for o in self.outcomes.values()) else 1

    def failing_ranks(self) -> list[int]:
        return sorted(r for r, o in self.outcomes.items() if not o.ok)


def _base_env(config: LaunchConfig, conf_path: Optional[Path]) -> dict[str, str]:
    env = dict(os.environ)
    env["MPX_SIZE"] = str(config.np)
    env["MPX_MODE"] = config.mode
    if conf_path is not None:
        env["MPX_CONF"] = str(conf_path)
    if config.profile:
        env["MPX_PROFILE"] = "1"
        env["MPX_PROF_DIR"] = config.profile_dir
    if config.trace:
        env["MPX_TRACE"] = "1"
        env.setdefault("MPX_PROF_DIR", config.profile_dir)
    for key, value in config.extra_env:
        env[key] = value
    return env


def _rank_command(config: LaunchConfig, node: str) -> list[str]:
    if config.remote_exec:
        command = config.remote_exec.format(
            address=node, command=shlex.join(config.program)
        )
        return shlex.split(command)
    return list(config.program)


def spawn(
    config: LaunchConfig, placement: Placement, conf_path: Optional[Path] = None
) -> ProcessSet:
    """Start rank processes; the conf file must already be on disk."""
    debug = config.debug_port_base is not None
    procs: list[RankProcess] = []
    if config.mode == "multicore":
        env = _base_env(config, conf_path)
        if debug:
            env["MPX_DEBUG_PORT"] = str(config.debug_port_base)
        try:
            proc = subprocess.Popen(
                list(config.program),
                env=env,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise LaunchError(f"cannot start {config.program[0]!r}: {exc}") from exc
        procs.append(RankProcess(MULTICORE_LABEL, proc))
    else:
        for entry in placement.entries:
            env = _base_env(config, conf_path)
            env["MPX_RANK"] = str(entry.rank)
            if debug:
                if entry.debug_port is None:
                    raise ConfigError(f"rank {entry.rank} has no debug port")
                env["MPX_DEBUG_PORT"] = str(entry.debug_port)
            if config.profile:
                env["MPX_PROF_NODE"] = str(entry.rank)
            try:
                proc = subprocess.Popen(
                    _rank_command(config, entry.node),
                    env=env,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    text=True,
                )
            except OSError as exc:
                for started in procs:
                    started.proc.kill()
                raise LaunchError(
                    f"rank {entry.rank}: cannot start {config.program[0]!r}: {exc}"
                ) from exc
            procs.append(RankProcess(str(entry.rank), proc))
    return ProcessSet(config.mode, config.np, procs, placement, conf_path)


def _pump(label: str, stream: IO[str], sink, lines: list[str], echo: bool) -> None:
    for raw in stream:
        line = raw.rstrip("\n")
        lines.append(line)
        if echo:
            print(f"[rank {label}] {line}", file=sink, flush=True)


def monitor(procset: ProcessSet, echo: bool = True, timeout: Optional[float] = None) -> ExitReport:
    """Stream child output with [rank N] prefixes and collect exit status."""
    stdout: dict[str, list[str]] = {}
    stderr: dict[str, list[str]] = {}
    pumps: list[threading.Thread] = []
    for rp in procset.procs:
        out_lines = stdout.setdefault(rp.label, [])
        err_lines = stderr.setdefault(rp.label, [])
        for stream, sink, lines in (
            (rp.proc.stdout, sys.stdout, out_lines),
            (rp.proc.stderr, sys.stderr, err_lines),
        ):
            t = threading.Thread(
                target=_pump, args=(rp.label, stream, sink, lines, echo), daemon=True
            )
            t.start()
            pumps.append(t)
    outcomes: dict[int, RankOutcome] = {}
    for rp in procset.procs:
        try:
            code = rp.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            rp.proc.kill()
            code = rp.proc.wait()
        if code < 0:
            outcome = RankOutcome(exit_code=None, term_signal=-code)
        else:
            outcome = RankOutcome(exit_code=code)
        if rp.label == MULTICORE_LABEL:
            for rank in range(procset.np):
                outcomes[rank] = outcome
        else:
            outcomes[int(rp.label)] = outcome
    for t in pumps:
        t.join(timeout=5.0)
    return ExitReport(outcomes, stdout, stderr)


def launch(
    config: LaunchConfig,
    *,
    conf_dir: str | Path = ".",
    default_port_base: int = DEFAULT_PORT_BASE,
    echo: bool = True,
    timeout: Optional[float] = None,
) -> ExitReport:
    """Place, write the conf file, spawn, and monitor one run."""
    if not config.program:
        raise UsageError("no program to run")
    if config.mode not in ("multicore", "cluster"):
        raise ConfigError(f"bad mode {config.mode!r}")
    machines = config.machines if config.mode == "cluster" else ("127.0.0.1",)
    if config.mode == "cluster" and not machines:
        raise UsageError("cluster mode requires a machines list")
    placement = assign_ranks(machines, config.np)
    debug = config.debug_port_base is not None
    conf_path: Optional[Path] = None
    if config.mode == "cluster" or debug:
        base = config.debug_port_base if debug else default_port_base
        placement = assign_ports(placement, base)
        placement = apply_host_offsets(placement)
        conf_path = Path(conf_dir) / "mpjdev.conf"
        write_conf(placement, conf_path)  # before any rank starts
    procset = spawn(config, placement, conf_path)
    return monitor(procset, echo=echo, timeout=timeout)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        config = parse_cli(args)
        report = launch(config)
    except UsageError as exc:
        print(f"mpxrun: {exc}", file=sys.stderr)
        print(USAGE, file=sys.stderr)
        return 2
    except (ConfigError, LaunchError) as exc:
        print(f"mpxrun: {exc}", file=sys.stderr)
        return 1
    for rank in report.failing_ranks():
        outcome = report.outcomes[rank]
        if outcome.term_signal is not None:
            print(f"mpxrun: rank {rank} killed by signal {outcome.term_signal}", file=sys.stderr)
        else:
            print(f"mpxrun: rank {rank} exited with code {outcome.exit_code}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
