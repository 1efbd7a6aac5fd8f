"""JSON Lines persistence for logged erroneous events."""

from __future__ import annotations

import heapq
import json
from pathlib import Path
from typing import IO, Iterable, Iterator

from .codec import InnerQuote, Proto
from .detector import ErroneousEvent, FlowKey, Pattern

SCHEMA_VERSION = 1

FIELDS = (
    "schema_version", "ts", "pattern", "src", "dst", "proto", "sport", "dport",
    "icmp_type", "icmp_code", "inner_src", "inner_dst", "inner_proto", "inner_sport", "inner_dport",
    "correlated", "pkts", "anon",
)


class EventStoreError(ValueError):
    pass


class SchemaMismatch(EventStoreError):
    pass


class MalformedLine(EventStoreError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


def to_record(ev: ErroneousEvent) -> dict:
    f = ev.flow
    q = ev.inner
    return {
        "schema_version": SCHEMA_VERSION,
        "ts": ev.ts,
        "pattern": ev.pattern.value,
        "src": f.initiator_ip,
        "dst": f.responder_ip,
        "proto": f.proto.name,
        "sport": f.initiator_port,
        "dport": f.responder_port,
        "icmp_type": ev.icmp_type,
        "icmp_code": ev.icmp_code,
        "inner_src": q.orig_src_ip if q else None,
        "inner_dst": q.orig_dst_ip if q else None,
        "inner_proto": q.orig_proto.name if q else None,
        "inner_sport": q.orig_src_port if q else None,
        "inner_dport": q.orig_dst_port if q else None,
        "correlated": ev.correlated,
        "pkts": ev.pkts_in_flow,
        "anon": ev.anon,
    }


def from_record(rec: dict) -> ErroneousEvent:
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(f"schema_version {version!r}, expected {SCHEMA_VERSION}")
    inner = None
    if rec.get("inner_src") is not None:
        inner = InnerQuote(
            rec["inner_src"], rec["inner_dst"], Proto[rec["inner_proto"]], int(rec["inner_sport"]), int(rec["inner_dport"]),
        )
    return ErroneousEvent(
        pattern=Pattern(rec["pattern"]),
        ts=float(rec["ts"]),
        flow=FlowKey(rec["src"], rec["dst"], Proto[rec["proto"]], int(rec["sport"]), int(rec["dport"])),
        icmp_type=rec["icmp_type"],
        icmp_code=rec["icmp_code"],
        inner=inner,
        pkts_in_flow=int(rec["pkts"]),
        correlated=bool(rec["correlated"]),
        anon=bool(rec["anon"]),
    )


def dumps(ev: ErroneousEvent) -> str:
    return json.dumps(to_record(ev), separators=(",", ":"))


class EventWriter:
    """Append-only writer; rejects events that would break timestamp order."""

    def __init__(self, path: str | Path, mode: str = "w"):
        self.path = Path(path)
        self._fh: IO[str] = open(self.path, mode, encoding="utf-8", newline="\n")
        self._last_ts = float("-inf")
        self.count = 0

    def append(self, ev: ErroneousEvent) -> None:
        if ev.ts < self._last_ts:
            raise EventStoreError(f"event at {ev.ts} precedes previous event at {self._last_ts}")
        self._last_ts = ev.ts
        self._fh.write(dumps(ev))
        self._fh.write("\n")
        self.count += 1

    def extend(self, events: Iterable[ErroneousEvent]) -> None:
        for ev in events:
            self.append(ev)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> EventWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def append(ev: ErroneousEvent, path: str | Path) -> None:
    with EventWriter(path, "a") as w:
        w.append(ev)


def iter_events(path: str | Path) -> Iterator[ErroneousEvent]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise MalformedLine(line_no, "not a JSON object")
            try:
                yield from_record(rec)
            except SchemaMismatch as exc:
                raise SchemaMismatch(f"line {line_no}: {exc}") from None
            except (KeyError, ValueError, TypeError) as exc:
                raise MalformedLine(line_no, f"bad field ({exc})") from None


def read_all(path: str | Path) -> list[ErroneousEvent]:
    return list(iter_events(path))


def merge(paths: Iterable[str | Path]) -> list[ErroneousEvent]:
    """Globally timestamp-ordered merge of several event files."""
    streams = [iter_events(p) for p in paths]
    return list(heapq.merge(*streams, key=ErroneousEvent.sort_key))


def write_all(events: Iterable[ErroneousEvent], path: str | Path) -> int:
    with EventWriter(path) as w:
        w.extend(events)
        return w.count
