"""Macro statistics over logged events: hourly timeline and sender skew."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .detector import DetectorCounters, ErroneousEvent

DEFAULT_BIN_WIDTH = 3600.0

TIMELINE_COLUMNS = ("bin_start", "pattern_a", "pattern_b", "pattern_c", "total")
CDF_COLUMNS = ("rank", "host", "events", "cum_fraction")


@dataclass
class TimeBin:
    bin_start: float
    width: float
    per_pattern: dict[str, int] = field(default_factory=lambda: {"A": 0, "B": 0, "C": 0})
    per_proto: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_pattern.values())


@dataclass
class HostContribution:
    host: str
    events: int
    cum_fraction: float


@dataclass
class SummaryReport:
    outbound_pkts: int = 0
    erroneous_pkts: int = 0
    erroneous_ratio: float = 0.0
    events: int = 0
    pattern_shares: dict[str, float] = field(default_factory=lambda: {"A": 0.0, "B": 0.0, "C": 0.0})
    internal_hosts: int = 0
    external_hosts: int = 0
    first_ts: float | None = None
    last_ts: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def timeline(events: Sequence[ErroneousEvent], bin_width: float = DEFAULT_BIN_WIDTH) -> list[TimeBin]:
    """Count events in fixed-width bins aligned to multiples of ``bin_width``.

    Bins cover every interval between the first and last event, including
    empty ones.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if not events:
        return []
    lo = min(ev.ts for ev in events)
    hi = max(ev.ts for ev in events)
    first = math.floor(lo / bin_width)
    n_bins = math.floor(hi / bin_width) - first + 1
    bins = [TimeBin((first + i) * bin_width, bin_width) for i in range(n_bins)]
    for ev in events:
        b = bins[math.floor(ev.ts / bin_width) - first]
        b.per_pattern[ev.pattern.value] += 1
        proto = ev.flow.proto.name
        b.per_proto[proto] = b.per_proto.get(proto, 0) + 1
    return bins


def sender_cdf(events: Sequence[ErroneousEvent]) -> list[HostContribution]:
    """Per-internal-host event counts, heaviest first, with cumulative share."""
    # Every logged event names the internal host as the flow initiator.
    counts = Counter(ev.flow.initiator_ip for ev in events)
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    out = []
    running = 0
    for host, n in ranked:
        running += n
        out.append(HostContribution(host, n, running / total))
    if out:
        out[-1].cum_fraction = 1.0
    return out


def top_share(cdf: Sequence[HostContribution], fraction: float) -> float:
    """Share of events contributed by the top ``fraction`` of hosts (at least one host)."""
    if not cdf:
        return 0.0
    k = max(1, math.ceil(len(cdf) * fraction))
    return cdf[k - 1].cum_fraction


def summary(counters: DetectorCounters | dict | None, events: Sequence[ErroneousEvent]) -> SummaryReport:
    rep = SummaryReport()
    if counters is not None:
        c = counters if isinstance(counters, dict) else counters.as_dict()
        rep.outbound_pkts = int(c.get("outbound_pkts", 0))
        rep.erroneous_pkts = int(c.get("erroneous_pkts", 0))
        rep.erroneous_ratio = rep.erroneous_pkts / rep.outbound_pkts if rep.outbound_pkts else 0.0
    rep.events = len(events)
    if events:
        per = Counter(ev.pattern.value for ev in events)
        rep.pattern_shares = {p: per.get(p, 0) / len(events) for p in ("A", "B", "C")}
        rep.internal_hosts = len({ev.flow.initiator_ip for ev in events})
        rep.external_hosts = len({ev.flow.responder_ip for ev in events})
        rep.first_ts = min(ev.ts for ev in events)
        rep.last_ts = max(ev.ts for ev in events)
    return rep


def write_timeline_csv(bins: Sequence[TimeBin], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for b in bins:
            p = b.per_pattern
            w.writerow([_num(b.bin_start), p["A"], p["B"], p["C"], b.total])


def write_cdf_csv(cdf: Sequence[HostContribution], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CDF_COLUMNS)
        for rank, h in enumerate(cdf, 1):
            w.writerow([rank, h.host, h.events, repr(h.cum_fraction)])


def write_summary_json(report: SummaryReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(x)
