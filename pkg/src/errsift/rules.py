"""Rule-based detectors for silent internal anomalies.

Each detector scans the event log for one symptom and reports findings with
the number of internal hosts, external hosts and packets involved. Every
logged event stands for one packet, so packet counts are event counts.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import ipaddress
import json
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .codec import Proto
from .detector import ErroneousEvent, Pattern
from .events import to_record

DAY = 86_400.0
HOUR = 3_600.0

BOGON_NETS = tuple(
    ipaddress.IPv4Network(n)
    for n in (
        "0.0.0.0/8", "10.0.0.0/8", "100.64.0.0/10", "127.0.0.0/8",
        "169.254.0.0/16", "172.16.0.0/12", "192.168.0.0/16", "240.0.0.0/4",
    )
)
_BOGON_MASKS = [(int(n.network_address), int(n.netmask)) for n in BOGON_NETS]


class RuleId(enum.Enum):
    REFLECTION_SURGE = "REFLECTION_SURGE"
    PERIODIC_PROBE = "PERIODIC_PROBE"
    SMTP_FANOUT = "SMTP_FANOUT"
    BOGON_DNS = "BOGON_DNS"
    UNANSWERED_NTP = "UNANSWERED_NTP"
    STALE_HTTP = "STALE_HTTP"
    RESOLVER_DARK = "RESOLVER_DARK"
    DNS_ACCELERATOR = "DNS_ACCELERATOR"


class Category(enum.Enum):
    MALICIOUS = "MALICIOUS"
    FAULTY = "FAULTY"
    STALE = "STALE"
    OTHER = "OTHER"


CATEGORY = {
    RuleId.REFLECTION_SURGE: Category.MALICIOUS,
    RuleId.PERIODIC_PROBE: Category.MALICIOUS,
    RuleId.SMTP_FANOUT: Category.MALICIOUS,
    RuleId.BOGON_DNS: Category.FAULTY,
    RuleId.UNANSWERED_NTP: Category.FAULTY,
    RuleId.STALE_HTTP: Category.STALE,
    RuleId.RESOLVER_DARK: Category.OTHER,
    RuleId.DNS_ACCELERATOR: Category.OTHER,
}

MAX_EVIDENCE = 10


# --------------------------------------------------------------------------
# Thresholds


@dataclass
class ReflectionSurgeThresholds:
    min_internal: int = 100
    window: float = HOUR


@dataclass
class PeriodicProbeThresholds:
    min_pkts: int = 1000
    # Upper bound on MAD / median of inter-arrival times.
    regularity: float = 0.3
    min_days: int = 2


@dataclass
class SmtpFanoutThresholds:
    min_ext: int = 100


@dataclass
class BogonDnsThresholds:
    min_internal: int = 5


@dataclass
class UnansweredNtpThresholds:
    min_pkts: int = 100


@dataclass
class StaleHttpThresholds:
    min_rate: float = 0.2
    min_hours: float = 12.0
    min_coverage: float = 0.8


@dataclass
class ResolverDarkThresholds:
    min_ext: int = 1000


@dataclass
class DnsAcceleratorThresholds:
    min_pkts: int = 500
    min_ext: int = 50


@dataclass
class RuleThresholds:
    reflection_surge: ReflectionSurgeThresholds = field(default_factory=ReflectionSurgeThresholds)
    periodic_probe: PeriodicProbeThresholds = field(default_factory=PeriodicProbeThresholds)
    smtp_fanout: SmtpFanoutThresholds = field(default_factory=SmtpFanoutThresholds)
    bogon_dns: BogonDnsThresholds = field(default_factory=BogonDnsThresholds)
    unanswered_ntp: UnansweredNtpThresholds = field(default_factory=UnansweredNtpThresholds)
    stale_http: StaleHttpThresholds = field(default_factory=StaleHttpThresholds)
    resolver_dark: ResolverDarkThresholds = field(default_factory=ResolverDarkThresholds)
    dns_accelerator: DnsAcceleratorThresholds = field(default_factory=DnsAcceleratorThresholds)

    def __post_init__(self) -> None:
        for group in dataclasses.fields(self):
            section = getattr(self, group.name)
            for f in dataclasses.fields(section):
                if not getattr(section, f.name) > 0:
                    raise ValueError(f"threshold {group.name}.{f.name} must be positive")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RuleThresholds:
        kwargs = {}
        types = {f.name: f.default_factory for f in dataclasses.fields(cls)}
        for name, values in data.items():
            if name not in types:
                raise ValueError(f"unknown rule section {name!r}")
            default = types[name]()
            known = {f.name for f in dataclasses.fields(default)}
            unknown = set(values) - known
            if unknown:
                raise ValueError(f"unknown thresholds in {name}: {sorted(unknown)}")
            kwargs[name] = dataclasses.replace(default, **values)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> RuleThresholds:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# Findings


@dataclass
class AnomalyFinding:
    rule_id: RuleId
    internal_hosts: int
    external_hosts: int
    packets: int
    window: tuple[float, float]
    evidence: list[ErroneousEvent] = field(default_factory=list)
    description: str = ""
    tags: list[str] = field(default_factory=list)
    # Indices into the analysed event sequence; not serialized.
    members: list[int] = field(default_factory=list, repr=False, compare=False)
    externals: set[str] = field(default_factory=set, repr=False, compare=False)

    @property
    def category(self) -> Category:
        return CATEGORY[self.rule_id]

    def as_dict(self) -> dict:
        return {
            "rule_id": self.rule_id.value,
            "category": self.category.value,
            "internal_hosts": self.internal_hosts,
            "external_hosts": self.external_hosts,
            "packets": self.packets,
            "window": list(self.window),
            "description": self.description,
            "tags": list(self.tags),
            "evidence": [to_record(ev) for ev in self.evidence],
        }


def _finding(rule: RuleId, events: Sequence[ErroneousEvent], idx: list[int], description: str) -> AnomalyFinding:
    idx = sorted(idx)
    internals = {events[i].flow.initiator_ip for i in idx}
    externals = {events[i].flow.responder_ip for i in idx}
    ts = [events[i].ts for i in idx]
    return AnomalyFinding(
        rule_id=rule,
        internal_hosts=len(internals),
        external_hosts=len(externals),
        packets=len(idx),
        window=(min(ts), max(ts)),
        evidence=[events[i] for i in idx[:MAX_EVIDENCE]],
        description=description,
        members=idx,
        externals=externals,
    )


def is_bogon(addr: str) -> bool:
    value = int(ipaddress.IPv4Address(addr))
    return any(value & mask == net for net, mask in _BOGON_MASKS)


def _is_port_unreachable(ev: ErroneousEvent) -> bool:
    return ev.icmp_type == 3 and ev.icmp_code == 3


# --------------------------------------------------------------------------
# Detectors


def detect_reflection_surge(events: Sequence[ErroneousEvent], th: ReflectionSurgeThresholds) -> list[AnomalyFinding]:
    """Many internal hosts answering one external source with port-unreachable.

    Pattern-C events are grouped by (external address, quoted destination
    port) and split into episodes wherever consecutive events are more than
    one window apart. An episode is reported when some window-long stretch of
    it involves at least ``min_internal`` distinct internal hosts.
    """
    groups: dict[tuple[str, int], list[int]] = defaultdict(list)
    for i, ev in enumerate(events):
        if ev.pattern is Pattern.C_ICMP_GENERATED and _is_port_unreachable(ev) and ev.inner is not None:
            groups[(ev.flow.responder_ip, ev.inner.orig_dst_port)].append(i)
    findings = []
    for (ext, port), idx in sorted(groups.items()):
        idx.sort(key=lambda i: events[i].ts)
        for episode in _episodes(events, idx, th.window):
            if _max_distinct_in_window(events, episode, th.window) >= th.min_internal:
                findings.append(
                    _finding(
                        RuleId.REFLECTION_SURGE, events, episode,
                        f"port unreachable replies to {ext} (port {port}): port scan from {ext}, "
                        f"or reflection abusing a spoofed {ext} source",
                    )
                )
    return findings


def _episodes(events: Sequence[ErroneousEvent], idx: list[int], gap: float) -> Iterable[list[int]]:
    current: list[int] = []
    for i in idx:
        if current and events[i].ts - events[current[-1]].ts > gap:
            yield current
            current = []
        current.append(i)
    if current:
        yield current


def _max_distinct_in_window(events: Sequence[ErroneousEvent], idx: list[int], window: float) -> int:
    counts: Counter[str] = Counter()
    best = 0
    lo = 0
    for hi, i in enumerate(idx):
        counts[events[i].flow.initiator_ip] += 1
        while events[i].ts - events[idx[lo]].ts > window:
            host = events[idx[lo]].flow.initiator_ip
            counts[host] -= 1
            if not counts[host]:
                del counts[host]
            lo += 1
        best = max(best, len(counts))
    return best


def regularity(timestamps: Sequence[float]) -> float:
    """MAD / median of inter-arrival gaps; inf when undefined."""
    ts = sorted(timestamps)
    gaps = [b - a for a, b in zip(ts, ts[1:])]
    if not gaps:
        return float("inf")
    med = statistics.median(gaps)
    if med <= 0:
        return float("inf")
    mad = statistics.median(abs(g - med) for g in gaps)
    return mad / med


def _pairs(events: Sequence[ErroneousEvent], pred: Callable[[ErroneousEvent], bool]) -> dict[tuple[str, str], list[int]]:
    out: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, ev in enumerate(events):
        if pred(ev):
            out[(ev.flow.initiator_ip, ev.flow.responder_ip)].append(i)
    return out


def _by_host(events: Sequence[ErroneousEvent], pred: Callable[[ErroneousEvent], bool]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = defaultdict(list)
    for i, ev in enumerate(events):
        if pred(ev):
            out[ev.flow.initiator_ip].append(i)
    return out


def detect_periodic_probe(events: Sequence[ErroneousEvent], th: PeriodicProbeThresholds) -> list[AnomalyFinding]:
    findings = []
    pairs = _pairs(events, lambda ev: ev.pattern is Pattern.A_NO_RESPONSE)
    for (src, dst), idx in sorted(pairs.items()):
        if len(idx) < th.min_pkts:
            continue
        ts = [events[i].ts for i in idx]
        if len({int(t // DAY) for t in ts}) < th.min_days:
            continue
        if regularity(ts) >= th.regularity:
            continue
        findings.append(_finding(RuleId.PERIODIC_PROBE, events, idx, f"{src} periodically probing {dst} without answer"))
    return findings


def detect_smtp_fanout(events: Sequence[ErroneousEvent], th: SmtpFanoutThresholds) -> list[AnomalyFinding]:
    findings = []
    hosts = _by_host(
        events,
        lambda ev: ev.pattern is Pattern.A_NO_RESPONSE and ev.flow.proto is Proto.TCP and ev.flow.responder_port == 25,
    )
    for src, idx in sorted(hosts.items()):
        if len({events[i].flow.responder_ip for i in idx}) >= th.min_ext:
            findings.append(_finding(RuleId.SMTP_FANOUT, events, idx, f"{src} sending unanswered SMTP connection attempts"))
    return findings


def detect_bogon_dns(events: Sequence[ErroneousEvent], th: BogonDnsThresholds) -> list[AnomalyFinding]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, ev in enumerate(events):
        f = ev.flow
        if f.proto is Proto.UDP and f.responder_port == 53 and is_bogon(f.responder_ip):
            groups[f.responder_ip].append(i)
    findings = []
    for dst, idx in sorted(groups.items()):
        if len({events[i].flow.initiator_ip for i in idx}) >= th.min_internal:
            findings.append(_finding(RuleId.BOGON_DNS, events, idx, f"DNS queries leaking to non-routable resolver {dst}"))
    return findings


def detect_unanswered_ntp(events: Sequence[ErroneousEvent], th: UnansweredNtpThresholds) -> list[AnomalyFinding]:
    hosts = _by_host(
        events,
        lambda ev: ev.pattern is Pattern.A_NO_RESPONSE and ev.flow.proto is Proto.UDP and ev.flow.responder_port == 123,
    )
    idx = [i for _, members in sorted(hosts.items()) if len(members) >= th.min_pkts for i in members]
    if not idx:
        return []
    return [_finding(RuleId.UNANSWERED_NTP, events, idx, "NTP clients polling peers that never answer")]


def detect_stale_http(
    events: Sequence[ErroneousEvent], th: StaleHttpThresholds, ports: frozenset[int] = frozenset({80, 443}),
) -> list[AnomalyFinding]:
    findings = []
    pairs = _pairs(
        events,
        lambda ev: ev.pattern is Pattern.A_NO_RESPONSE and ev.flow.proto is Proto.TCP and ev.flow.responder_port in ports,
    )
    for (src, dst), idx in sorted(pairs.items()):
        ts = [events[i].ts for i in idx]
        lo, hi = min(ts), max(ts)
        span = hi - lo
        if span < th.min_hours * HOUR or len(ts) / span < th.min_rate:
            continue
        first_bin = int(lo // HOUR)
        n_bins = int(hi // HOUR) - first_bin + 1
        covered = len({int(t // HOUR) for t in ts})
        if covered / n_bins < th.min_coverage:
            continue
        findings.append(_finding(RuleId.STALE_HTTP, events, idx, f"{src} persistently contacting unresponsive web server {dst}"))
    return findings


def detect_resolver_dark(events: Sequence[ErroneousEvent], th: ResolverDarkThresholds) -> list[AnomalyFinding]:
    hosts = _by_host(
        events,
        lambda ev: ev.pattern is Pattern.A_NO_RESPONSE and ev.flow.proto is Proto.UDP and ev.flow.responder_port == 53,
    )
    idx = [
        i for _, members in sorted(hosts.items())
        if len({events[j].flow.responder_ip for j in members}) >= th.min_ext
        for i in members
    ]
    if not idx:
        return []
    return [_finding(RuleId.RESOLVER_DARK, events, idx, "internal resolvers with many unanswered upstream queries")]


def detect_dns_accelerator(events: Sequence[ErroneousEvent], th: DnsAcceleratorThresholds) -> list[AnomalyFinding]:
    hosts = _by_host(
        events,
        lambda ev: (
            ev.pattern is Pattern.C_ICMP_GENERATED
            and _is_port_unreachable(ev)
            and ev.inner is not None
            and ev.inner.orig_src_port == 53
        ),
    )
    idx = [
        i for _, members in sorted(hosts.items())
        if len(members) >= th.min_pkts and len({events[j].flow.responder_ip for j in members}) >= th.min_ext
        for i in members
    ]
    if not idx:
        return []
    return [_finding(RuleId.DNS_ACCELERATOR, events, idx, "late DNS replies hitting closed sockets (parallel resolver queries)")]


# --------------------------------------------------------------------------
# Orchestration


@dataclass
class DetectionReport:
    findings: list[AnomalyFinding]
    total_events: int
    explained_events: int

    @property
    def explained_fraction(self) -> float:
        return self.explained_events / self.total_events if self.total_events else 0.0

    def as_dict(self) -> dict:
        return {
            "findings": [f.as_dict() for f in self.findings],
            "coverage": {
                "total_events": self.total_events,
                "explained_events": self.explained_events,
                "explained_fraction": self.explained_fraction,
            },
        }


def load_denylist(path: str | Path) -> list[ipaddress.IPv4Network]:
    nets = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            nets.append(ipaddress.IPv4Network(line, strict=False))
    return nets


def run_all(
    events: Sequence[ErroneousEvent],
    thresholds: RuleThresholds | None = None,
    denylist: Sequence[ipaddress.IPv4Network] = (),
) -> DetectionReport:
    th = thresholds or RuleThresholds()
    findings = [
        *detect_reflection_surge(events, th.reflection_surge),
        *detect_periodic_probe(events, th.periodic_probe),
        *detect_smtp_fanout(events, th.smtp_fanout),
        *detect_bogon_dns(events, th.bogon_dns),
        *detect_unanswered_ntp(events, th.unanswered_ntp),
        *detect_stale_http(events, th.stale_http),
        *detect_resolver_dark(events, th.resolver_dark),
        *detect_dns_accelerator(events, th.dns_accelerator),
    ]
    if denylist:
        for f in findings:
            if any(ipaddress.IPv4Address(ext) in net for ext in f.externals for net in denylist):
                f.tags.append("listed-destination")
    findings.sort(key=lambda f: (-f.packets, f.rule_id.value, f.window))
    explained = set()
    for f in findings:
        explained.update(f.members)
    return DetectionReport(findings, len(events), len(explained))


FINDINGS_CSV_COLUMNS = (
    "rule_id", "category", "internal_hosts", "external_hosts", "packets", "window_start", "window_end", "tags", "description",
)


def write_findings(report: DetectionReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "findings.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
    with open(out / "findings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FINDINGS_CSV_COLUMNS)
        for f in report.findings:
            w.writerow([
                f.rule_id.value, f.category.value, f.internal_hosts, f.external_hosts, f.packets,
                repr(f.window[0]), repr(f.window[1]), ";".join(f.tags), f.description,
            ])
