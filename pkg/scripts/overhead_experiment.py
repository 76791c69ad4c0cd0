#!/usr/bin/env python3
"""Measure what the profiler costs on the ping-pong benchmark.

Runs the benchmark twice under the real launcher (2 ranks, multicore),
once plain and once with -profile, then prints the per-metric relative
change computed from the two result files.

    python3 scripts/overhead_experiment.py --sizes 1,1024 --reps 2000
"""
from __future__ import annotations

import argparse
import shlex
import subprocess
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mpx.bench import overhead_report, read_results, render_overhead  # noqa: E402

PINGPONG_SHIM = "import sys; from mpx.bench import pingpong_main; sys.exit(pingpong_main())"


def run_once(workdir: Path, sizes: str, reps: int, profiled: bool) -> Path:
    out_csv = workdir / ("profiled.csv" if profiled else "base.csv")
    cmd = [sys.executable, "-m", "mpx.launcher", "-np", "2"]
    if profiled:
        cmd += ["-profile", "-profdir", str(workdir)]
    cmd += [
        "--",
        sys.executable,
        "-c",
        PINGPONG_SHIM,
        "--sizes",
        sizes,
        "--reps",
        str(reps),
        "--out",
        str(out_csv),
    ]
    print(f"$ {shlex.join(cmd)}", file=sys.stderr)
    subprocess.run(cmd, cwd=workdir, check=True)
    return out_csv


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="1,1024,65536")
    parser.add_argument("--reps", type=int, default=1000)
    parser.add_argument(
        "--workdir", default=None, help="keep intermediate files here instead of a temp dir"
    )
    ns = parser.parse_args(argv)

    workdir = Path(ns.workdir) if ns.workdir else Path(tempfile.mkdtemp(prefix="mpx-overhead-"))
    workdir.mkdir(parents=True, exist_ok=True)

    base_csv = run_once(workdir, ns.sizes, ns.reps, profiled=False)
    prof_csv = run_once(workdir, ns.sizes, ns.reps, profiled=True)

    base = {(r.benchmark, r.params_token(), r.reps): r for r in read_results(base_csv)}
    prof = {(r.benchmark, r.params_token(), r.reps): r for r in read_results(prof_csv)}
    for key in sorted(base):
        rows = overhead_report(base[key], prof[key])
        sys.stdout.write(render_overhead(key[0], key[1], rows))
    print(f"(raw results under {workdir})", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
