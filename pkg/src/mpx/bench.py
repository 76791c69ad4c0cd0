"""Message-passing benchmarks plus the profiling-overhead comparison.

Three programs, each runnable under mpxrun or directly:

  * pingpong: two ranks bounce a payload; reports one-way latency (median
    round trip / 2) and bandwidth in decimal megabits per second.
  * ep: embarrassingly parallel kernel; every rank draws its share of
    2^scale coordinate pairs from one global LCG stream (jump-ahead keeps
    the draw sequence identical for any rank count) and counts pairs
    inside the unit circle; rank 0 gathers the partial counts.
  * overhead: compares a base run's CSV against a profiled run's CSV and
    prints the relative slowdown per metric.

Results travel as CSV rows: benchmark,profiled,reps,params,metric,value.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from statistics import median
from typing import Optional, Sequence

from . import harness
from .errors import ReportError, UsageError

PINGPONG_TAG = 7
EP_TAG = 11

# 64-bit LCG, the PCG default multiplier/increment
LCG_A = 6364136223846793005
LCG_C = 1442695040888963407
LCG_M = 1 << 64
_DRAW_SCALE = 2.0**-53


@dataclass(frozen=True)
class BenchResult:
    benchmark: str
    params: dict[str, int]
    reps: int
    metrics: dict[str, float]
    profiled: bool

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")

    def params_token(self) -> str:
        return ";".join(f"{k}={self.params[k]}" for k in sorted(self.params))


def _profiling_active(environment=None) -> bool:
    env = os.environ if environment is None else environment
    return env.get("MPX_PROFILE", "") not in ("", "0")


# -- result CSV ------------------------------------------------------------------

CSV_HEADER = ["benchmark", "profiled", "reps", "params", "metric", "value"]


def write_results(path, results: Sequence[BenchResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in results:
            for metric in sorted(r.metrics):
                writer.writerow(
                    [
                        r.benchmark,
                        int(r.profiled),
                        r.reps,
                        r.params_token(),
                        metric,
                        repr(r.metrics[metric]),
                    ]
                )


def read_results(path) -> list[BenchResult]:
    grouped: dict[tuple, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ReportError(f"{path}: bad header {header!r}")
        for row in reader:
            if len(row) != 6:
                raise ReportError(f"{path}: bad row {row!r}")
            benchmark, profiled_s, reps_s, params, metric, value = row
            key = (benchmark, profiled_s, reps_s, params)
            grouped.setdefault(key, {})[metric] = float(value)
    results = []
    for (benchmark, profiled_s, reps_s, params), metrics in grouped.items():
        parsed: dict[str, int] = {}
        if params:
            for item in params.split(";"):
                k, _, v = item.partition("=")
                parsed[k] = int(v)
        results.append(
            BenchResult(benchmark, parsed, int(reps_s), metrics, bool(int(profiled_s)))
        )
    return results


# -- ping-pong ---------------------------------------------------------------------


def pingpong(ctx, sizes: Sequence[int], reps: int) -> list[BenchResult]:
    """Bounce payloads between ranks 0 and 1, one result per size."""
    if ctx.size != 2:
        raise UsageError(f"pingpong needs exactly 2 ranks, got {ctx.size}")
    if reps < 1:
        raise UsageError("reps must be >= 1")
    profiled = _profiling_active()
    peer = 1 - ctx.rank
    results = []
    for size in sizes:
        if size < 1:
            raise UsageError(f"bad message size {size}")
        payload = bytes(size)
        warmup = max(1, reps // 10)
        rtts_us: list[int] = []
        for i in range(warmup + reps):
            if ctx.rank == 0:
                t0 = harness.now_us()
                with harness.probe_scope("roundtrip"):
                    ctx.send(peer, PINGPONG_TAG, payload)
                    echo = ctx.recv(peer, PINGPONG_TAG)
                rtt = harness.now_us() - t0
                if len(echo) != size:
                    raise RuntimeError("echo size mismatch")
                if i >= warmup:
                    rtts_us.append(rtt)
            else:
                with harness.probe_scope("roundtrip"):
                    ctx.send(peer, PINGPONG_TAG, ctx.recv(peer, PINGPONG_TAG))
        ctx.barrier()
        if ctx.rank == 0:
            rtt_med = median(rtts_us)
            if rtt_med <= 0:
                rtt_med = 0.5  # clock floor: round trips under one tick
            results.append(
                BenchResult(
                    "pingpong",
                    {"size": size},
                    reps,
                    {
                        "latency_us": rtt_med / 2,
                        "bandwidth_mbps": size * 8 * 2 / rtt_med,
                    },
                    profiled,
                )
            )
    return results


# -- EP kernel ----------------------------------------------------------------------


def lcg_next(state: int) -> int:
    return (LCG_A * state + LCG_C) % LCG_M


def lcg_jump(state: int, steps: int) -> int:
    """Advance the LCG by `steps` in O(log steps) transform compositions."""
    a_cur, c_cur = LCG_A, LCG_C
    a_acc, c_acc = 1, 0
    k = steps
    while k:
        if k & 1:
            a_acc = (a_cur * a_acc) % LCG_M
            c_acc = (a_cur * c_acc + c_cur) % LCG_M
        c_cur = (a_cur * c_cur + c_cur) % LCG_M
        a_cur = (a_cur * a_cur) % LCG_M
        k >>= 1
    return (a_acc * state + c_acc) % LCG_M


def _draw(state: int) -> tuple[int, float]:
    state = lcg_next(state)
    return state, (state >> 11) * _DRAW_SCALE


def _share(total: int, rank: int, size: int) -> tuple[int, int]:
    """Contiguous near-even split: rank's (offset, count) into `total` items."""
    base, extra = divmod(total, size)
    count = base + (1 if rank < extra else 0)
    offset = rank * base + min(rank, extra)
    return offset, count


def ep_count(seed: int, offset: int, count: int) -> int:
    """Count in-circle pairs for draws [2*offset, 2*(offset+count)) of the
    global stream started at `seed`."""
    state = lcg_jump(seed % LCG_M, 2 * offset)
    inside = 0
    for _ in range(count):
        state, x = _draw(state)
        state, y = _draw(state)
        if x * x + y * y <= 1.0:
            inside += 1
    return inside


def ep_kernel(ctx, scale: int, seed: int) -> tuple[Optional[BenchResult], Optional[int]]:
    """Run the kernel on this rank; rank 0 returns (result, checksum),
    every other rank returns (None, None)."""
    if scale < 10:
        raise UsageError(f"scale must be >= 10, got {scale}")
    pairs = 1 << scale
    profiled = _profiling_active()
    t0 = time.monotonic()
    offset, count = _share(pairs, ctx.rank, ctx.size)
    with harness.probe_scope("generate"):
        inside = ep_count(seed, offset, count)
    with harness.probe_scope("reduce"):
        if ctx.rank == 0:
            total = inside
            for src in range(1, ctx.size):
                total += int.from_bytes(ctx.recv(src, EP_TAG), "big")
        else:
            ctx.send(0, EP_TAG, inside.to_bytes(8, "big"))
            total = None
    wall_s = time.monotonic() - t0
    if ctx.rank != 0:
        return None, None
    result = BenchResult(
        "ep",
        {"scale": scale, "seed": seed},
        1,
        {"wall_s": max(wall_s, 1e-9)},
        profiled,
    )
    return result, total


# -- overhead -----------------------------------------------------------------------


@dataclass(frozen=True)
class OverheadRow:
    metric: str
    base_value: float
    profiled_value: float
    overhead_pct: float


def overhead_report(base: BenchResult, profiled: BenchResult) -> list[OverheadRow]:
    """Relative change per metric, exact in rational arithmetic; negative
    values pass through as measured."""
    if base.benchmark != profiled.benchmark:
        raise ReportError(
            f"benchmark mismatch: {base.benchmark!r} vs {profiled.benchmark!r}"
        )
    if base.params != profiled.params:
        raise ReportError(
            f"parameter mismatch: {base.params_token()!r} vs {profiled.params_token()!r}"
        )
    if base.reps != profiled.reps:
        raise ReportError(f"reps mismatch: {base.reps} vs {profiled.reps}")
    if base.profiled == profiled.profiled:
        raise ReportError("need one profiled and one unprofiled result")
    if set(base.metrics) != set(profiled.metrics):
        raise ReportError(
            f"metric mismatch: {sorted(base.metrics)} vs {sorted(profiled.metrics)}"
        )
    rows = []
    for metric in sorted(base.metrics):
        b = Fraction(base.metrics[metric])
        p = Fraction(profiled.metrics[metric])
        if b <= 0:
            raise ReportError(f"non-positive base value for {metric}")
        pct = float(Fraction(100) * (p - b) / b)
        rows.append(OverheadRow(metric, base.metrics[metric], profiled.metrics[metric], pct))
    return rows


def render_overhead(benchmark: str, params_token: str, rows: Sequence[OverheadRow]) -> str:
    lines = [f"== {benchmark} {params_token} ==".rstrip()]
    for row in rows:
        lines.append(
            f"{row.metric}  base={row.base_value!r}  profiled={row.profiled_value!r}  "
            f"overhead={row.overhead_pct:+.1f}%"
        )
    return "\n".join(lines) + "\n"


# -- CLI entry points ----------------------------------------------------------------


def _parse_sizes(token: str) -> list[int]:
    try:
        sizes = [int(part) for part in token.split(",") if part]
    except ValueError:
        raise UsageError(f"bad --sizes value {token!r}") from None
    if not sizes:
        raise UsageError("--sizes is empty")
    return sizes


def pingpong_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="bench-pingpong")
    parser.add_argument("--sizes", default="1,1024,1048576")
    parser.add_argument("--reps", type=int, default=1000)
    parser.add_argument("--out", default=None)
    try:
        ns = parser.parse_args(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as exc:
        return int(exc.code or 2)

    def program(ctx, args) -> None:
        results = pingpong(ctx, _parse_sizes(ns.sizes), ns.reps)
        if ctx.rank == 0:
            if ns.out:
                write_results(ns.out, results)
            for r in results:
                print(
                    f"pingpong size={r.params['size']} "
                    f"latency_us={r.metrics['latency_us']!r} "
                    f"bandwidth_mbps={r.metrics['bandwidth_mbps']!r}"
                )

    try:
        return harness.run(program)
    except UsageError as exc:
        print(f"bench-pingpong: {exc}", file=sys.stderr)
        return 2


def ep_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="bench-ep")
    parser.add_argument("--scale", type=int, default=16)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", default=None)
    try:
        ns = parser.parse_args(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as exc:
        return int(exc.code or 2)

    def program(ctx, args) -> None:
        result, checksum = ep_kernel(ctx, ns.scale, ns.seed)
        if ctx.rank == 0:
            assert result is not None
            if ns.out:
                write_results(ns.out, [result])
            print(f"ep scale={ns.scale} seed={ns.seed} checksum={checksum} "
                  f"wall_s={result.metrics['wall_s']!r}")

    try:
        return harness.run(program)
    except UsageError as exc:
        print(f"bench-ep: {exc}", file=sys.stderr)
        return 2


def overhead_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="bench-overhead")
    parser.add_argument("--base", required=True)
    parser.add_argument("--profiled", required=True)
    try:
        ns = parser.parse_args(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as exc:
        return int(exc.code or 2)
    try:
        base_results = {
            (r.benchmark, r.params_token(), r.reps): r for r in read_results(ns.base)
        }
        prof_results = {
            (r.benchmark, r.params_token(), r.reps): r for r in read_results(ns.profiled)
        }
        if set(base_results) != set(prof_results):
            raise ReportError(
                f"result sets differ: {sorted(base_results)} vs {sorted(prof_results)}"
            )
        if not base_results:
            raise ReportError("no results to compare")
        for key in sorted(base_results):
            rows = overhead_report(base_results[key], prof_results[key])
            sys.stdout.write(render_overhead(key[0], key[1], rows))
        return 0
    except (ReportError, OSError) as exc:
        print(f"bench-overhead: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(overhead_main())
