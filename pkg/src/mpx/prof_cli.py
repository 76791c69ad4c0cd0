"""mpxprof: load, aggregate, validate, and merge profiler output files.

Works on a directory of `profile.<node>.<context>.<thread>` files (and
`trace.*` siblings for merging). Parsing is the exact inverse of the
profiler's writer, so parse-then-rewrite is byte-stable on valid files.
All aggregation happens in integer microsecond ticks; means are exact
rationals until the final unit formatting.
"""
from __future__ import annotations

import argparse
import csv
import io
import re
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .errors import LoadError, MergeError, ReportError
from .profiler import (
    ROOT_NAME,
    FunctionStats,
    ProfileIdentity,
    format_profile,
    quote_name,
    unquote_name,
)

PROFILE_NAME_RE = re.compile(r"^profile\.(\d+)\.(\d+)\.(\d+)$")
TRACE_NAME_RE = re.compile(r"^trace\.(\d+)\.(\d+)\.(\d+)$")

Number = Union[int, Fraction]


@dataclass(frozen=True)
class ProfileData:
    identity: ProfileIdentity
    rows: tuple[FunctionStats, ...]
    comments: tuple[str, ...]
    path: Path

    def row_map(self) -> dict[str, FunctionStats]:
        return {r.name: r for r in self.rows}


@dataclass(frozen=True)
class ProfileSet:
    directory: Path
    profiles: tuple[ProfileData, ...]

    def __len__(self) -> int:
        return len(self.profiles)

    def names(self) -> list[str]:
        seen = set()
        for p in self.profiles:
            seen.update(r.name for r in p.rows)
        return sorted(seen)


def _parse_quoted(line: str, where: str) -> tuple[str, str]:
    """Split a leading quoted name off `line`, honoring backslash escapes."""
    if not line.startswith('"'):
        raise LoadError(f"{where}: expected quoted name")
    i = 1
    while i < len(line):
        if line[i] == "\\":
            i += 2
        elif line[i] == '"':
            return unquote_name(line[: i + 1]), line[i + 1 :]
        else:
            i += 1
    raise LoadError(f"{where}: unterminated quoted name")


def parse_profile_text(text: str, source: str = "<text>") -> tuple[list[FunctionStats], list[str]]:
    """Parse one profile file body into (rows, comments)."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise LoadError(f"{source}: missing trailing newline")
    if not lines:
        raise LoadError(f"{source}, line 1: empty file")
    head = lines[0].split(" ")
    if len(head) != 2 or head[1] != "functions" or not head[0].isdigit():
        raise LoadError(f"{source}, line 1: expected '<F> functions'")
    count = int(head[0])
    rows: list[FunctionStats] = []
    seen: set[str] = set()
    lineno = 1
    for lineno in range(2, 2 + count):
        if lineno - 1 >= len(lines):
            raise LoadError(f"{source}, line {lineno}: truncated (wanted {count} functions)")
        where = f"{source}, line {lineno}"
        name, rest = _parse_quoted(lines[lineno - 1], where)
        fields = rest.split()
        if len(fields) != 4:
            raise LoadError(f"{where}: expected 4 counters after the name")
        try:
            calls, subrs, excl, incl = (int(f) for f in fields)
        except ValueError:
            raise LoadError(f"{where}: non-integer counter") from None
        if name in seen:
            raise LoadError(f"{where}: duplicate function {name!r}")
        seen.add(name)
        rows.append(FunctionStats(name, calls, subrs, excl, incl))
    trailer_at = 2 + count
    if trailer_at - 1 >= len(lines) or lines[trailer_at - 1] != "0 aggregates":
        raise LoadError(f"{source}, line {trailer_at}: expected '0 aggregates'")
    comments: list[str] = []
    for offset, line in enumerate(lines[trailer_at:], start=trailer_at + 1):
        if not line.startswith("# "):
            raise LoadError(f"{source}, line {offset}: junk after '0 aggregates'")
        comments.append(line[2:])
    return rows, comments


def load_profile(path: Path) -> ProfileData:
    match = PROFILE_NAME_RE.match(path.name)
    if match is None:
        raise LoadError(f"{path}: not a profile filename")
    identity = ProfileIdentity(*(int(g) for g in match.groups()))
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    rows, comments = parse_profile_text(text, source=str(path))
    return ProfileData(identity, tuple(rows), tuple(comments), path)


def load_profiles(directory: Union[str, Path]) -> ProfileSet:
    """Load every file in `directory` whose name matches the profile scheme."""
    root = Path(directory)
    found = []
    try:
        entries = list(root.iterdir())
    except OSError as exc:
        raise LoadError(f"{root}: {exc}") from exc
    for path in entries:
        if path.is_file() and PROFILE_NAME_RE.match(path.name):
            found.append(load_profile(path))
    found.sort(key=lambda p: (p.identity.node, p.identity.context, p.identity.thread))
    return ProfileSet(root, tuple(found))


# -- aggregation ----------------------------------------------------------------


@dataclass(frozen=True)
class AggRow:
    name: str
    calls: Number
    subrs: Number
    excl_us: Number
    incl_us: Number


def _zero_padded(profile: ProfileData, names: Iterable[str]) -> dict[str, FunctionStats]:
    table = profile.row_map()
    return {n: table.get(n, FunctionStats(n)) for n in names}


def aggregate(pset: ProfileSet, scope: str) -> list[AggRow]:
    """Combine a set into one row list; scope is 'mean' or 'total'.

    Functions absent from an identity count as zero there, so a mean is
    always over the full identity count.
    """
    if scope not in ("mean", "total"):
        raise ValueError(f"bad scope {scope!r}")
    if not pset.profiles:
        raise ReportError("no profiles to aggregate")
    names = pset.names()
    rows = []
    n = len(pset.profiles)
    for name in names:
        calls = subrs = excl = incl = 0
        for profile in pset.profiles:
            st = profile.row_map().get(name)
            if st is not None:
                calls += st.calls
                subrs += st.subrs
                excl += st.excl_us
                incl += st.incl_us
        if scope == "mean":
            rows.append(
                AggRow(
                    name,
                    Fraction(calls, n),
                    Fraction(subrs, n),
                    Fraction(excl, n),
                    Fraction(incl, n),
                )
            )
        else:
            rows.append(AggRow(name, calls, subrs, excl, incl))
    return rows


_SORT_FIELDS = {"excl": "excl_us", "incl": "incl_us", "calls": "calls"}


def sort_rows(rows: Iterable[AggRow], sort_key: str) -> list[AggRow]:
    field_name = _SORT_FIELDS.get(sort_key)
    if field_name is None:
        raise ReportError(f"bad sort key {sort_key!r}")
    return sorted(rows, key=lambda r: (-getattr(r, field_name), r.name))


def _round_half_even_str(value: Number, places: int) -> str:
    """Format an exact rational with `places` decimals, ties to even."""
    fr = Fraction(value)
    scale = 10**places
    scaled = fr * scale
    q, r = divmod(scaled.numerator, scaled.denominator)
    if 2 * r > scaled.denominator or (2 * r == scaled.denominator and q % 2):
        q += 1
    sign = "-" if q < 0 else ""
    q = abs(q)
    return f"{sign}{q // scale}.{q % scale:0{places}d}"


def format_count(value: Number) -> str:
    fr = Fraction(value)
    if fr.denominator == 1:
        return str(fr.numerator)
    return _round_half_even_str(fr, 3)


def format_ticks(value: Number, units: str) -> str:
    """Render integer-microsecond ticks in us, ms, or s."""
    fr = Fraction(value)
    if units == "us":
        return format_count(fr)
    if units == "ms":
        return _round_half_even_str(fr / 1000, 3)
    if units == "s":
        return _round_half_even_str(fr / 1_000_000, 3)
    raise ReportError(f"bad units {units!r}")


def _table(headers: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    """Plain text table: left-aligned first column, two-space separators."""
    widths = [len(h) for h in headers]
    for row in body:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    out = []
    for row in [headers, *body]:
        cells = [row[0].ljust(widths[0])] + [
            cell.rjust(widths[i]) for i, cell in enumerate(row) if i > 0
        ]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"


def report(
    pset: ProfileSet,
    scope: str = "mean",
    sort_key: str = "excl",
    units: str = "us",
    fmt: str = "table",
) -> str:
    """Render the set as a text table or CSV."""
    if units not in ("s", "ms", "us"):
        raise ReportError(f"bad units {units!r}")
    if fmt not in ("table", "csv"):
        raise ReportError(f"bad format {fmt!r}")
    headers = ["function", "calls", "subrs", f"excl_{units}", f"incl_{units}"]

    def render_rows(rows: list[AggRow]) -> list[list[str]]:
        return [
            [
                quote_name(r.name),
                format_count(r.calls),
                format_count(r.subrs),
                format_ticks(r.excl_us, units),
                format_ticks(r.incl_us, units),
            ]
            for r in sort_rows(rows, sort_key)
        ]

    if scope == "per-thread":
        sections = []
        for profile in pset.profiles:
            rows = [
                AggRow(r.name, r.calls, r.subrs, r.excl_us, r.incl_us)
                for r in profile.rows
            ]
            sections.append((profile.identity, render_rows(rows)))
        if fmt == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(["node", "context", "thread", *headers])
            for identity, body in sections:
                for row in body:
                    writer.writerow(
                        [identity.node, identity.context, identity.thread, *row]
                    )
            return buf.getvalue()
        chunks = []
        for identity, body in sections:
            chunks.append(f"== {identity.filename()} ==")
            chunks.append(_table(headers, body).rstrip("\n"))
        return "\n".join(chunks) + "\n" if chunks else ""
    if scope in ("mean", "total"):
        body = render_rows(aggregate(pset, scope))
        if fmt == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(headers)
            writer.writerows(body)
            return buf.getvalue()
        title = f"== {scope} over {len(pset)} profiles =="
        return title + "\n" + _table(headers, body)
    raise ReportError(f"bad scope {scope!r}")


# -- validation -----------------------------------------------------------------


def validate(pset: ProfileSet) -> list[str]:
    """Check on-disk invariants; returns human-readable violations."""
    violations = []
    for profile in pset.profiles:
        where = profile.identity.filename()
        root_incl: Optional[int] = None
        excl_sum = 0
        for row in profile.rows:
            q = quote_name(row.name)
            for field_name in ("calls", "subrs", "excl_us", "incl_us"):
                value = getattr(row, field_name)
                if value < 0:
                    violations.append(f"{where}: {q} negative {field_name} {value}")
            if row.incl_us < row.excl_us:
                violations.append(
                    f"{where}: {q} inclusive {row.incl_us} < exclusive {row.excl_us}"
                )
            excl_sum += row.excl_us
            if row.name == ROOT_NAME:
                root_incl = row.incl_us
        # without a root row the conservation check is vacuous
        if root_incl is not None and excl_sum != root_incl:
            violations.append(
                f"{where}: exclusive sum {excl_sum} != root inclusive {root_incl}"
            )
    return violations


# -- trace merging ---------------------------------------------------------------


@dataclass(frozen=True)
class MergedEvent:
    ts_us: int
    node: int
    thread: int
    kind: str
    name: str

    def line(self) -> str:
        return f"{self.ts_us} {self.node} {self.thread} {self.kind} {quote_name(self.name)}"


def _parse_trace_line(line: str, where: str) -> tuple[int, int, str, str]:
    parts = line.split(" ", 3)
    if len(parts) != 4:
        raise MergeError(f"{where}: expected '<ts> <thread> <enter|exit> \"<name>\"'")
    ts_s, thread_s, kind, quoted = parts
    try:
        ts = int(ts_s)
        thread = int(thread_s)
    except ValueError:
        raise MergeError(f"{where}: non-integer timestamp or thread") from None
    if kind not in ("enter", "exit"):
        raise MergeError(f"{where}: bad event kind {kind!r}")
    try:
        name = unquote_name(quoted)
    except ValueError as exc:
        raise MergeError(f"{where}: {exc}") from None
    return ts, thread, kind, name


def merge_traces(directory: Union[str, Path], out_path: Union[str, Path]) -> int:
    """Merge every trace file in `directory` into one (node, thread)-tagged
    timeline at `out_path`; returns the event count."""
    root = Path(directory)
    events: list[tuple[tuple[int, int, int, int, int], MergedEvent]] = []
    found = False
    try:
        entries = sorted(root.iterdir())
    except OSError as exc:
        raise MergeError(f"{root}: {exc}") from exc
    for path in entries:
        match = TRACE_NAME_RE.match(path.name)
        if not match or not path.is_file():
            continue
        found = True
        node, context, file_thread = (int(g) for g in match.groups())
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise MergeError(f"{path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            where = f"{path}, line {lineno}"
            ts, thread, kind, name = _parse_trace_line(line, where)
            if thread != file_thread:
                raise MergeError(
                    f"{where}: thread {thread} does not match filename thread {file_thread}"
                )
            key = (ts, node, thread, context, lineno)
            events.append((key, MergedEvent(ts, node, thread, kind, name)))
    if not found:
        raise MergeError(f"{root}: no trace files")
    events.sort(key=lambda pair: pair[0])
    body = "".join(e.line() + "\n" for _, e in events)
    Path(out_path).write_text(body, encoding="utf-8")
    return len(events)


def split_merged(merged_path: Union[str, Path]) -> dict[tuple[int, int], list[str]]:
    """Re-split a merged timeline by (node, thread), reconstructing the
    original per-file line format. The inverse of merge_traces for traces
    whose timestamps were non-decreasing per file."""
    out: dict[tuple[int, int], list[str]] = {}
    text = Path(merged_path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{merged_path}, line {lineno}"
        parts = line.split(" ", 4)
        if len(parts) != 5:
            raise MergeError(f"{where}: expected 5 fields")
        ts_s, node_s, thread_s, kind, quoted = parts
        try:
            node = int(node_s)
            thread = int(thread_s)
            int(ts_s)
        except ValueError:
            raise MergeError(f"{where}: non-integer field") from None
        out.setdefault((node, thread), []).append(f"{ts_s} {thread_s} {kind} {quoted}")
    return out


# -- CLI ---------------------------------------------------------------------------


def rewrite_profile(data: ProfileData) -> str:
    """Writer form of a parsed profile; byte-identical for valid files."""
    return format_profile(data.rows, data.comments)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="mpxprof")
    sub = parser.add_subparsers(dest="command", required=True)

    p_report = sub.add_parser("report")
    p_report.add_argument("dir")
    p_report.add_argument("--scope", choices=["per-thread", "mean", "total"], default="mean")
    p_report.add_argument("--sort", choices=["excl", "incl", "calls"], default="excl")
    p_report.add_argument("--units", choices=["s", "ms", "us"], default="us")
    p_report.add_argument("--format", choices=["table", "csv"], default="table")

    p_validate = sub.add_parser("validate")
    p_validate.add_argument("dir")

    p_merge = sub.add_parser("merge")
    p_merge.add_argument("dir")
    p_merge.add_argument("-o", "--out", required=True)

    try:
        ns = parser.parse_args(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as exc:
        return int(exc.code or 2)

    try:
        if ns.command == "report":
            pset = load_profiles(ns.dir)
            sys.stdout.write(report(pset, ns.scope, ns.sort, ns.units, ns.format))
            return 0
        if ns.command == "validate":
            pset = load_profiles(ns.dir)
            violations = validate(pset)
            if violations:
                for v in violations:
                    print(v)
                return 1
            print(f"clean: {len(pset)} profiles")
            return 0
        if ns.command == "merge":
            count = merge_traces(ns.dir, ns.out)
            print(f"merged {count} events into {ns.out}")
            return 0
    except (LoadError, ReportError, MergeError) as exc:
        print(f"mpxprof: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
