"""Reading and writing mpjdev.conf rank/port maps.

The encoding is deliberately rigid so files are byte-stable: UTF-8, LF
line endings, one ``<address> <rank> <debug_port>`` record per line in
rank order, single-space separators, no header and no trailing blank
line. Addresses may be hostnames or IP literals.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

from .errors import ConfigError

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ConfRecord:
    """One rank's endpoint: the address and port its debug agent listens on."""

    address: str
    rank: int
    debug_port: int


@dataclass(frozen=True)
class ConfFile:
    """Parsed mpjdev.conf: exactly one record per rank, in rank order."""

    records: tuple[ConfRecord, ...]

    @property
    def np(self) -> int:
        return len(self.records)

    def record_for(self, rank: int) -> ConfRecord:
        if not 0 <= rank < len(self.records):
            raise ValueError(f"rank {rank} not in conf (np={len(self.records)})")
        return self.records[rank]


def _validated(records: Sequence[ConfRecord], source: str) -> tuple[ConfRecord, ...]:
    recs = tuple(records)
    for i, rec in enumerate(recs):
        where = f"{source}: line {i + 1}"
        if rec.rank != i:
            raise ConfigError(f"{where}: expected rank {i}, found {rec.rank}")
        if not rec.address or any(ch.isspace() for ch in rec.address):
            raise ConfigError(f"{where}: bad address {rec.address!r}")
        if not 0 <= rec.debug_port <= 65535:
            raise ConfigError(f"{where}: port {rec.debug_port} out of range")
    return recs


def format_conf(records: Sequence[ConfRecord]) -> str:
    recs = _validated(records, "<records>")
    return "".join(f"{r.address} {r.rank} {r.debug_port}\n" for r in recs)


def parse_conf_text(text: str, source: str = "<string>") -> ConfFile:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line == "":
            raise ConfigError(f"{source}: line {lineno}: blank line")
        parts = line.split(" ")
        if len(parts) != 3:
            raise ConfigError(
                f"{source}: line {lineno}: expected 3 space-separated fields"
            )
        address, rank_s, port_s = parts
        try:
            rank, port = int(rank_s), int(port_s)
        except ValueError:
            raise ConfigError(
                f"{source}: line {lineno}: non-integer rank or port"
            ) from None
        records.append(ConfRecord(address, rank, port))
    return ConfFile(_validated(records, source))


def read_conf(path: PathLike) -> ConfFile:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read conf file {p}: {exc}") from exc
    return parse_conf_text(text, source=str(p))


def write_conf_file(records: Sequence[ConfRecord], path: PathLike) -> ConfFile:
    """Write records at `path` and read them back (the parse is the receipt)."""
    p = Path(path)
    p.write_bytes(format_conf(records).encode("utf-8"))
    return read_conf(p)
