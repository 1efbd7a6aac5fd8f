"""Labelled synthetic pcap traces.

A scenario mixes benign background flows with optional sparse erroneous
noise and planted anomalies. Generation is deterministic for a given seed:
each flow draws its shape when created and rebuilds its packets from a
per-flow seed when it is written, so the output is byte-identical across
runs. Timestamps are integer microseconds throughout.

The ground-truth file labels every flow key (``benign``, ``A``, ``B``, ``C``
or ``refused``) and lists the finding each planted anomaly should produce.
"""

from __future__ import annotations

import heapq
import ipaddress
import json
import math
import random
import socket
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .codec import (
    ETH_HEADER_LEN,
    TCP_ACK,
    TCP_FIN,
    TCP_PSH,
    TCP_RST,
    TCP_SYN,
    LinkType,
    PcapWriter,
    Proto,
    checksum,
    ethernet,
    parse_prefixes,
)
from .detector import FlowKey
from .rules import CATEGORY, RuleId, is_bogon

US = 1_000_000
DEFAULT_START = 1_709_510_400  # 2024-03-04T00:00:00Z
SNAP_LEN = 256
# Flows never start this close to the end, so every response deadline
# resolves inside the trace.
TAIL_GUARD = 60
PRESETS = ("preset-table1-scaled", "preset-background-only", "preset-ratio-0p06")

NOISE_PORTS = (22, 1900, 3389, 4444, 5060, 6881, 8080, 27015)
LABELS = ("benign", "A", "B", "C", "refused")

Packet = tuple  # (ts_us, frame, orig_len, outbound, erroneous (internal, external) | None)


class InfeasibleScenario(ValueError):
    """The scenario's parameters cannot be realized."""


# --------------------------------------------------------------------------
# Scenario and ground truth


@dataclass
class PlantedSpec:
    rule_id: RuleId
    params: dict[str, Any] = field(default_factory=dict)
    # Optional subset of {"internal_hosts", "external_hosts", "packets"} to verify.
    expected: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> PlantedSpec:
        try:
            rule = RuleId(data["rule_id"])
        except (KeyError, ValueError):
            raise InfeasibleScenario(f"unknown planted rule {data.get('rule_id')!r}") from None
        return cls(rule, dict(data.get("params", {})), dict(data.get("expected", {})))


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    start: int = DEFAULT_START
    duration: int = 3600
    internal_prefixes: list[str] = field(default_factory=lambda: ["10.0.0.0/16"])
    background_hosts: int = 500
    background_flows_per_hour: int = 1000
    # When set, background flows are added until the trace holds about this many packets.
    target_packets: int | None = None
    mean_flow_pkts: float = 12.0
    # Share of erroneous packets among outbound packets; None means use the noise counts.
    erroneous_fraction: float | None = None
    noise_a_flows: int = 0
    noise_b_flows: int = 0
    planted: list[PlantedSpec] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> Scenario:
        data = dict(data)
        planted = [PlantedSpec.from_dict(p) for p in data.pop("planted", [])]
        known = set(cls.__dataclass_fields__) - {"planted"}
        unknown = set(data) - known
        if unknown:
            raise InfeasibleScenario(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data, planted=planted)

    @classmethod
    def from_json(cls, path: str | Path) -> Scenario:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def preset(cls, name: str) -> Scenario:
        name = name.removesuffix(".json")
        if name not in PRESETS:
            raise InfeasibleScenario(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        text = resources.files("errsift").joinpath("presets", f"{name}.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))


@dataclass
class ExpectedFinding:
    rule_id: RuleId
    internal_hosts: int
    external_hosts: int
    packets: int
    window: tuple[float, float]

    def as_dict(self) -> dict:
        return {
            "rule_id": self.rule_id.value,
            "category": CATEGORY[self.rule_id].value,
            "internal_hosts": self.internal_hosts,
            "external_hosts": self.external_hosts,
            "packets": self.packets,
            "window": list(self.window),
        }


@dataclass
class GroundTruth:
    scenario: str
    seed: int
    internal_prefixes: list[str]
    packets: int
    outbound_pkts: int
    erroneous_pkts: int
    labels: dict[str, str]
    expected_findings: list[ExpectedFinding]
    planted_erroneous_pkts: int

    @property
    def erroneous_ratio(self) -> float:
        return self.erroneous_pkts / self.outbound_pkts if self.outbound_pkts else 0.0

    @property
    def planted_share(self) -> float:
        return self.planted_erroneous_pkts / self.erroneous_pkts if self.erroneous_pkts else 0.0

    def flows_with(self, label: str) -> dict[FlowKey, str]:
        return {FlowKey.parse(k): v for k, v in self.labels.items() if v == label}

    def as_dict(self) -> dict:
        counts = {lab: 0 for lab in LABELS}
        for v in self.labels.values():
            counts[v] += 1
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "internal_prefixes": self.internal_prefixes,
            "packets": self.packets,
            "outbound_pkts": self.outbound_pkts,
            "erroneous_pkts": self.erroneous_pkts,
            "erroneous_ratio": self.erroneous_ratio,
            "planted_erroneous_pkts": self.planted_erroneous_pkts,
            "planted_share": self.planted_share,
            "label_counts": counts,
            "expected_findings": [f.as_dict() for f in self.expected_findings],
            "labels": dict(sorted(self.labels.items())),
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> GroundTruth:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            scenario=d["scenario"],
            seed=d["seed"],
            internal_prefixes=d["internal_prefixes"],
            packets=d["packets"],
            outbound_pkts=d["outbound_pkts"],
            erroneous_pkts=d["erroneous_pkts"],
            labels=d["labels"],
            expected_findings=[
                ExpectedFinding(RuleId(f["rule_id"]), f["internal_hosts"], f["external_hosts"], f["packets"], tuple(f["window"]))
                for f in d["expected_findings"]
            ],
            planted_erroneous_pkts=d["planted_erroneous_pkts"],
        )


# --------------------------------------------------------------------------
# Frame builders


_ETH_LEN = ETH_HEADER_LEN
_aton = socket.inet_aton
_IP = struct.Struct("!BBHHHBBH4s4s")


def _ip(src: str, dst: str, proto: int, length: int) -> bytes:
    hdr = _IP.pack(0x45, 0, 20 + length, 0, 0x4000, 64, proto, 0, _aton(src), _aton(dst))
    return hdr[:10] + struct.pack("!H", checksum(hdr)) + hdr[12:]


def tcp_frame(src: str, dst: str, sport: int, dport: int, flags: int, payload: int = 0) -> tuple[bytes, int]:
    l4 = struct.pack("!HHIIBBHHH", sport, dport, 0, 0, 0x50, flags, 65535, 0, 0)
    frame = ethernet(_ip(src, dst, 6, 20 + payload) + l4)
    return frame, len(frame) + payload


def udp_frame(src: str, dst: str, sport: int, dport: int, payload: int = 0) -> tuple[bytes, int]:
    l4 = struct.pack("!HHHH", sport, dport, 8 + payload, 0)
    frame = ethernet(_ip(src, dst, 17, 8 + payload) + l4)
    return frame, len(frame) + payload


def echo_frame(src: str, dst: str, itype: int, ident: int, seq: int, payload: int = 56) -> tuple[bytes, int]:
    msg = struct.pack("!BBHHH", itype, 0, 0, ident, seq)
    msg = msg[:2] + struct.pack("!H", checksum(msg)) + msg[4:]
    frame = ethernet(_ip(src, dst, 1, 8 + payload) + msg)
    return frame, len(frame) + payload


def icmp_error_frame(src: str, dst: str, itype: int, code: int, offending: bytes) -> tuple[bytes, int]:
    """ICMP error from ``src`` to ``dst`` quoting the IP header plus 8 bytes of ``offending`` (an Ethernet frame)."""
    ip = offending[_ETH_LEN:]
    ihl = (ip[0] & 0x0F) * 4
    quote = ip[: ihl + 8]
    msg = struct.pack("!BBHI", itype, code, 0, 0) + quote
    msg = msg[:2] + struct.pack("!H", checksum(msg)) + msg[4:]
    frame = ethernet(_ip(src, dst, 1, len(msg)) + msg)
    return frame, len(frame)


# --------------------------------------------------------------------------
# Flows


@dataclass(slots=True)
class _Flow:
    start: int
    build: Callable[[random.Random], list[Packet]]
    seed: int
    labels: list[tuple[FlowKey, str]]
    n_out: int
    n_err: int
    n_total: int
    plant: int | None = None


def _k(src: str, dst: str, proto: Proto, sport: int, dport: int) -> FlowKey:
    return FlowKey(src, dst, proto, sport, dport)


def _tcp_session(a: str, b: str, sport: int, dport: int, n: int, t0: int, a_internal: bool):
    """Handshake, ``n - 5`` alternating data segments, then FIN exchange; ``a`` opens."""

    def build(rng: random.Random) -> list[Packet]:
        rtt = rng.randint(5_000, 200_000)
        t = t0
        pkts: list[Packet] = []
        fwd = a_internal

        def add(out_dir: bool, flags: int, payload: int = 0) -> None:
            src, dst, sp, dp = (a, b, sport, dport) if out_dir else (b, a, dport, sport)
            frame, orig = tcp_frame(src, dst, sp, dp, flags, payload)
            pkts.append((t, frame, orig, out_dir == fwd, None))

        add(True, TCP_SYN)
        t += rtt
        add(False, TCP_SYN | TCP_ACK)
        t += rng.randint(50, 2_000)
        add(True, TCP_ACK)
        for i in range(n - 5):
            t += rng.randint(200, 40_000)
            add(i % 2 == 0, TCP_PSH | TCP_ACK, rng.randint(40, 1400))
        t += rng.randint(200, 40_000)
        add(True, TCP_FIN | TCP_ACK)
        t += rtt
        add(False, TCP_FIN | TCP_ACK)
        return pkts

    opener_pkts = 3 + math.ceil((n - 5) / 2)
    n_out = opener_pkts if a_internal else n - opener_pkts
    return build, n_out


class _Alloc:
    """Unique internal hosts, external addresses and per-host source ports."""

    def __init__(self, rng: random.Random, prefixes: tuple[ipaddress.IPv4Network, ...]):
        self.rng = rng
        self.prefixes = prefixes
        net = prefixes[0]
        n_hosts = net.num_addresses - 2
        if n_hosts < 16:
            raise InfeasibleScenario("first internal prefix is too small")
        self._base = int(net.network_address) + 1
        self._order = rng.sample(range(n_hosts), min(n_hosts, 60_000))
        self._next_host = 0
        self._used_ext: set[str] = set()
        self._ports: dict[str, list[int]] = {}

    def host(self) -> str:
        if self._next_host >= len(self._order):
            raise InfeasibleScenario("scenario needs more internal hosts than the prefix provides")
        addr = self._base + self._order[self._next_host]
        self._next_host += 1
        return str(ipaddress.IPv4Address(addr))

    def hosts(self, n: int) -> list[str]:
        return [self.host() for _ in range(n)]

    def external(self) -> str:
        rng = self.rng
        while True:
            addr = str(ipaddress.IPv4Address(rng.randint(0x0B000000, 0xDFFFFFFF)))
            if addr in self._used_ext or is_bogon(addr) or addr.startswith("100."):
                continue
            ip = ipaddress.IPv4Address(addr)
            if any(ip in p for p in self.prefixes):
                continue
            self._used_ext.add(addr)
            return addr

    def reserve(self, addr: str) -> str:
        self._used_ext.add(addr)
        return addr

    def port(self, host: str) -> int:
        """Next ephemeral port for ``host``; never repeats within a trace."""
        state = self._ports.get(host)
        if state is None:
            state = self._ports[host] = [self.rng.randint(1024, 65535), 0]
        if state[1] >= 64_512:
            raise InfeasibleScenario(f"host {host} ran out of source ports")
        p = state[0]
        state[0] = 1024 if p == 65535 else p + 1
        state[1] += 1
        return p


# --------------------------------------------------------------------------
# Generator


class _Builder:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.rng = random.Random(sc.seed)
        self.prefixes = parse_prefixes(sc.internal_prefixes)
        self.alloc = _Alloc(self.rng, self.prefixes)
        self.flows: list[_Flow] = []
        self.t0 = sc.start * US
        self.t_end = (sc.start + sc.duration) * US

    # -- helpers -----------------------------------------------------------

    def _add(self, start: int, build, labels, n_out: int, n_err: int, n_total: int, plant: int | None = None) -> None:
        if start < self.t0 or start > self.t_end - TAIL_GUARD * US:
            raise InfeasibleScenario("a flow falls outside the scenario duration")
        self.flows.append(_Flow(start, build, self.rng.getrandbits(64), labels, n_out, n_err, n_total, plant))

    def _at(self, offset_s: float) -> int:
        return self.t0 + round(offset_s * US)

    def _rand_start(self) -> int:
        return self.rng.randint(self.t0, self.t_end - TAIL_GUARD * US)

    # -- erroneous building blocks -----------------------------------------

    def unanswered(self, host: str, ext: str, proto: Proto, sport: int, dport: int, times: list[int], plant=None) -> None:
        def build(rng: random.Random) -> list[Packet]:
            out = []
            for t in times:
                if proto is Proto.TCP:
                    frame, orig = tcp_frame(host, ext, sport, dport, TCP_SYN)
                else:
                    frame, orig = udp_frame(host, ext, sport, dport, 48)
                out.append((t, frame, orig, True, (host, ext)))
            return out

        key = _k(host, ext, proto, sport, dport)
        self._add(times[0], build, [(key, "A")], len(times), len(times), len(times), plant)

    def elicited(self, host: str, ext: str, sport: int, dport: int, n: int, code: int, router: str | None, start: int) -> None:
        def build(rng: random.Random) -> list[Packet]:
            out = []
            t = start
            for _ in range(n):
                frame, orig = udp_frame(host, ext, sport, dport, 64)
                out.append((t, frame, orig, True, (host, ext)))
                err, err_len = icmp_error_frame(router or ext, host, 3, code, frame)
                out.append((t + rng.randint(2_000, 150_000), err, err_len, False, None))
                t += US
            return out

        self._add(start, build, [(_k(host, ext, Proto.UDP, sport, dport), "B")], n, n, 2 * n)

    # -- background --------------------------------------------------------

    def background_flow(self, hosts: list[str], servers: list[str], resolvers: list[str]) -> None:
        rng = self.rng
        host = rng.choice(hosts)
        start = self._rand_start()
        kind = rng.random()
        mean = self.sc.mean_flow_pkts
        if kind < 0.55:
            n = max(5, round(5 + rng.expovariate(1 / max(mean - 5, 0.5))))
            srv = rng.choice(servers)
            sport = self.alloc.port(host)
            dport = rng.choice((443, 443, 443, 80))
            build, n_out = _tcp_session(host, srv, sport, dport, n, start, True)
            self._add(start, build, [(_k(host, srv, Proto.TCP, sport, dport), "benign")], n_out, 0, n)
        elif kind < 0.70:
            ext = rng.choice(servers)
            n = max(5, round(5 + rng.expovariate(1 / max(mean - 5, 0.5))))
            sport = rng.randint(1024, 65535)
            build, n_out = _tcp_session(ext, host, sport, 443, n, start, False)
            self._add(start, build, [(_k(ext, host, Proto.TCP, sport, 443), "benign")], n_out, 0, n)
        elif kind < 0.88:
            res = rng.choice(resolvers)
            sport = self.alloc.port(host)

            def build(r: random.Random, host=host, res=res, sport=sport, start=start) -> list[Packet]:
                q, ql = udp_frame(host, res, sport, 53, 40)
                a, al = udp_frame(res, host, 53, sport, 120)
                return [(start, q, ql, True, None), (start + r.randint(2_000, 300_000), a, al, False, None)]

            self._add(start, build, [(_k(host, res, Proto.UDP, sport, 53), "benign")], 1, 0, 2)
        elif kind < 0.96:
            srv = rng.choice(servers)
            sport = self.alloc.port(host)
            n = max(2, round(rng.expovariate(1 / max(mean, 2))))

            def build(r: random.Random, host=host, srv=srv, sport=sport, n=n, start=start) -> list[Packet]:
                out, t = [], start
                for i in range(n):
                    if i % 2 == 0:
                        f, ln = udp_frame(host, srv, sport, 443, r.randint(40, 1200))
                    else:
                        f, ln = udp_frame(srv, host, 443, sport, r.randint(40, 1200))
                    out.append((t, f, ln, i % 2 == 0, None))
                    t += r.randint(500, 60_000)
                return out

            self._add(start, build, [(_k(host, srv, Proto.UDP, sport, 443), "benign")], (n + 1) // 2, 0, n)
        elif kind < 0.98:
            srv = rng.choice(servers)
            ident = self.alloc.port(host)
            pairs = rng.randint(1, 4)

            def build(r: random.Random, host=host, srv=srv, ident=ident, pairs=pairs, start=start) -> list[Packet]:
                out, t = [], start
                for s in range(pairs):
                    f, ln = echo_frame(host, srv, 8, ident, s)
                    out.append((t, f, ln, True, None))
                    f, ln = echo_frame(srv, host, 0, ident, s)
                    out.append((t + r.randint(5_000, 250_000), f, ln, False, None))
                    t += US
                return out

            self._add(start, build, [(_k(host, srv, Proto.ICMP, ident, 0), "benign")], pairs, 0, 2 * pairs)
        else:
            srv = rng.choice(servers)
            sport = self.alloc.port(host)
            dport = rng.choice((8443, 9000, 5432))

            def build(r: random.Random, host=host, srv=srv, sport=sport, dport=dport, start=start) -> list[Packet]:
                s, sl = tcp_frame(host, srv, sport, dport, TCP_SYN)
                rst, rl = tcp_frame(srv, host, dport, sport, TCP_RST | TCP_ACK)
                return [(start, s, sl, True, None), (start + r.randint(5_000, 200_000), rst, rl, False, None)]

            self._add(start, build, [(_k(host, srv, Proto.TCP, sport, dport), "refused")], 1, 0, 2)

    def noise_a(self, hosts: list[str], n_pkts: int | None = None) -> int:
        rng = self.rng
        host = rng.choice(hosts)
        ext = self.alloc.external()
        proto = rng.choice((Proto.TCP, Proto.UDP))
        n = n_pkts if n_pkts is not None else rng.randint(1, 3)
        start = self._rand_start()
        gaps = (0, US, 3 * US) if proto is Proto.TCP else (0, US, 2 * US)
        self.unanswered(host, ext, proto, self.alloc.port(host), rng.choice(NOISE_PORTS), [start + gaps[i] for i in range(n)])
        return n

    def noise_b(self, hosts: list[str], n_pkts: int | None = None) -> int:
        rng = self.rng
        host = rng.choice(hosts)
        ext = self.alloc.external()
        n = n_pkts if n_pkts is not None else rng.randint(1, 2)
        router = self.alloc.external() if rng.random() < 0.3 else None
        code = 1 if router else 3
        self.elicited(host, ext, self.alloc.port(host), rng.choice(NOISE_PORTS), n, code, router, self._rand_start())
        return n

    # -- planted anomalies -------------------------------------------------

    def plant(self, idx: int, spec: PlantedSpec) -> None:
        p = spec.params
        rng = self.rng
        rule = spec.rule_id
        if rule is RuleId.REFLECTION_SURGE:
            ext = self.alloc.reserve(p.get("external", "1.1.1.1"))
            port = int(p.get("port", 500))
            hosts = self.alloc.hosts(int(p.get("internal_hosts", 700)))
            t = self._at(p.get("start", 7200))
            spread = float(p.get("spread", 1200)) * US
            for i, h in enumerate(hosts):
                ti = t + round(i * spread / len(hosts))

                def build(r: random.Random, h=h, ti=ti) -> list[Packet]:
                    f, ln = udp_frame(ext, h, port, port, 100)
                    e, el = icmp_error_frame(h, ext, 3, 3, f)
                    return [(ti, f, ln, False, None), (ti + r.randint(50, 900), e, el, True, (h, ext))]

                labels = [(_k(ext, h, Proto.UDP, port, port), "benign"), (_k(h, ext, Proto.ICMP, 0, 0), "C")]
                self._add(ti, build, labels, 1, 1, 2, idx)
        elif rule is RuleId.PERIODIC_PROBE:
            host = self.alloc.host()
            ext = self.alloc.external()
            period = float(p.get("period", 113.0))
            jitter = float(p.get("jitter", 0.01))
            t = self._at(p.get("start", 3600))
            for _ in range(int(p.get("packets", 2290))):
                self.unanswered(host, ext, Proto.TCP, self.alloc.port(host), int(p.get("port", 443)), [t], idx)
                t += round(period * (1 + rng.uniform(-jitter, jitter)) * US)
        elif rule is RuleId.SMTP_FANOUT:
            host = self.alloc.host()
            exts = [self.alloc.external() for _ in range(int(p.get("external_hosts", 382)))]
            n = int(p.get("packets", 2050))
            t = self._at(p.get("start", 30_000))
            span = float(p.get("span", 21_600)) * US
            for i in range(n):
                ti = t + round(i * span / n)
                self.unanswered(host, exts[i % len(exts)], Proto.TCP, self.alloc.port(host), 25, [ti], idx)
        elif rule is RuleId.BOGON_DNS:
            target = p.get("target", "100.100.100.100")
            if not is_bogon(target):
                raise InfeasibleScenario(f"bogon DNS target {target} is not a bogon address")
            if any(ipaddress.IPv4Address(target) in net for net in self.prefixes):
                raise InfeasibleScenario("bogon DNS target lies inside the internal prefixes")
            clients = self.alloc.hosts(int(p.get("internal_hosts", 32)))
            n = int(p.get("packets", 5810))
            for i in range(n):
                c = clients[i % len(clients)]
                self.unanswered(c, target, Proto.UDP, self.alloc.port(c), 53, [self._rand_start()], idx)
        elif rule is RuleId.UNANSWERED_NTP:
            hosts = self.alloc.hosts(int(p.get("internal_hosts", 6)))
            exts = [self.alloc.external() for _ in range(int(p.get("external_hosts", 3)))]
            polls = int(p.get("packets", 720)) // (len(hosts) * len(exts))
            interval = float(p.get("interval", 64)) * US
            if polls * len(hosts) * len(exts) != int(p.get("packets", 720)):
                raise InfeasibleScenario("NTP packets must split evenly over host/server pairs")
            base = self._at(p.get("start", 50_000))
            for h in hosts:
                for e in exts:
                    t = base + rng.randint(0, 600) * US
                    self.unanswered(h, e, Proto.UDP, 123, 123, [t + round(k * interval) for k in range(polls)], idx)
        elif rule is RuleId.STALE_HTTP:
            host = self.alloc.host()
            ext = self.alloc.external()
            interval = float(p.get("interval", 2.5)) * US
            t = self._at(p.get("start", 88_200))
            for k in range(int(p.get("packets", 18_000))):
                self.unanswered(host, ext, Proto.TCP, self.alloc.port(host), int(p.get("port", 80)), [t + round(k * interval)], idx)
        elif rule is RuleId.RESOLVER_DARK:
            hosts = self.alloc.hosts(int(p.get("internal_hosts", 3)))
            per = int(p.get("externals_per_host", 1500))
            retries = int(p.get("pkts_per_flow", 2))
            for h in hosts:
                for _ in range(per):
                    ext = self.alloc.external()
                    t = self._rand_start()
                    self.unanswered(h, ext, Proto.UDP, self.alloc.port(h), 53, [t + k * 2 * US for k in range(retries)], idx)
        elif rule is RuleId.DNS_ACCELERATOR:
            hosts = self.alloc.hosts(int(p.get("internal_hosts", 50)))
            resolvers = [self.alloc.external() for _ in range(int(p.get("resolvers", 200)))]
            fanout = int(p.get("fanout", 8))
            batches = int(p.get("batches", 100))
            if fanout < 2 or fanout > len(resolvers):
                raise InfeasibleScenario("accelerator fanout must be between 2 and the resolver count")
            for h in hosts:
                for _ in range(batches):
                    self._dns_batch(h, rng.sample(resolvers, fanout), self._rand_start(), idx)
        else:  # pragma: no cover
            raise InfeasibleScenario(f"cannot plant {rule}")

    def _dns_batch(self, host: str, resolvers: list[str], start: int, plant: int) -> None:
        sport = self.alloc.port(host)

        def build(r: random.Random) -> list[Packet]:
            out = []
            t = start
            for res in resolvers:
                q, ql = udp_frame(host, res, sport, 53, 40)
                out.append((t, q, ql, True, None))
                t += r.randint(20, 200)
            t = start + r.randint(5_000, 30_000)
            for i, res in enumerate(resolvers):
                a, al = udp_frame(res, host, 53, sport, 120)
                out.append((t, a, al, False, None))
                if i:
                    # The socket closed after the first answer.
                    e, el = icmp_error_frame(host, res, 3, 3, a)
                    out.append((t + r.randint(20, 300), e, el, True, (host, res)))
                t += r.randint(1_000, 40_000)
            out.sort(key=lambda x: x[0])
            return out

        labels = [(_k(host, res, Proto.UDP, sport, 53), "benign") for res in resolvers]
        labels += [(_k(host, res, Proto.ICMP, 0, 0), "C") for res in resolvers[1:]]
        late = len(resolvers) - 1
        self._add(start, build, labels, len(resolvers) + late, late, 2 * len(resolvers) + late, plant)

    # -- assembly ----------------------------------------------------------

    def populate(self) -> None:
        sc = self.sc
        if sc.duration <= 2 * TAIL_GUARD:
            raise InfeasibleScenario("duration is too short")
        if sc.erroneous_fraction is not None and not 0 <= sc.erroneous_fraction < 1:
            raise InfeasibleScenario("erroneous_fraction must lie in [0, 1)")
        for i, spec in enumerate(sc.planted):
            self.plant(i, spec)
        hosts = self.alloc.hosts(sc.background_hosts)
        servers = [self.alloc.external() for _ in range(max(50, sc.background_hosts // 2))]
        resolvers = [self.alloc.external() for _ in range(8)]
        self.resolvers = resolvers
        self.hosts = hosts
        if sc.target_packets is None:
            for _ in range(round(sc.background_flows_per_hour * sc.duration / 3600)):
                self.background_flow(hosts, servers, resolvers)
        else:
            f = sc.erroneous_fraction or 0.0
            total = sum(fl.n_total for fl in self.flows)
            out = sum(fl.n_out for fl in self.flows)
            err = sum(fl.n_err for fl in self.flows)
            # Leave room for noise packets (about two per erroneous outbound one) and the closing flow.
            while total + 2 * max(self._noise_needed(out, err, f), 0) + 2 < sc.target_packets:
                self.background_flow(hosts, servers, resolvers)
                fl = self.flows[-1]
                total += fl.n_total
                out += fl.n_out
        if sc.erroneous_fraction is not None:
            out = sum(fl.n_out for fl in self.flows)
            err = sum(fl.n_err for fl in self.flows)
            need = self._noise_needed(out, err, sc.erroneous_fraction)
            if need < 0:
                raise InfeasibleScenario(
                    f"planted anomalies already exceed erroneous_fraction={sc.erroneous_fraction}"
                )
            while need > 0:
                n = min(need, self.rng.randint(1, 3))
                if self.rng.random() < 0.8:
                    self.noise_a(hosts, n)
                else:
                    self.noise_b(hosts, min(n, 2))
                    n = min(n, 2)
                need -= n
        else:
            for _ in range(sc.noise_a_flows):
                self.noise_a(hosts)
            for _ in range(sc.noise_b_flows):
                self.noise_b(hosts)
        self._closing_flow(hosts[0], resolvers[0])

    def _noise_needed(self, out: int, err: int, f: float) -> int:
        # Erroneous noise packets are outbound too: (err + x) / (out + x) = f.
        benign_out = out - err
        return round(f * benign_out / (1 - f)) - err

    def _closing_flow(self, host: str, res: str) -> None:
        # A benign exchange at the very end carries the clock past every deadline.
        t = self.t_end
        sport = self.alloc.port(host)

        def build(r: random.Random) -> list[Packet]:
            q, ql = udp_frame(host, res, sport, 53, 40)
            a, al = udp_frame(res, host, 53, sport, 120)
            return [(t, q, ql, True, None), (t + 1_000, a, al, False, None)]

        self.flows.append(_Flow(t, build, 0, [(_k(host, res, Proto.UDP, sport, 53), "benign")], 1, 0, 2))


def generate(scenario: Scenario, pcap_path: str | Path, truth_path: str | Path | None = None) -> GroundTruth:
    """Write the scenario's trace to ``pcap_path`` and return (and optionally write) its ground truth."""
    b = _Builder(scenario)
    b.populate()
    flows = sorted(range(len(b.flows)), key=lambda i: (b.flows[i].start, i))

    labels: dict[str, str] = {}
    for fl in b.flows:
        for key, lab in fl.labels:
            s = str(key)
            old = labels.get(s)
            if old is not None and old != lab:
                raise InfeasibleScenario(f"flow {s} would carry both {old} and {lab} labels")
            labels[s] = lab

    n_plants = len(scenario.planted)
    p_int: list[set[str]] = [set() for _ in range(n_plants)]
    p_ext: list[set[str]] = [set() for _ in range(n_plants)]
    p_pkts = [0] * n_plants
    p_win: list[list[int]] = [[0, 0] for _ in range(n_plants)]
    total = outbound = erroneous = 0

    heap: list[tuple[int, int, int, int]] = []  # (ts, flow order, pkt idx, flow idx)
    built: dict[int, list[Packet]] = {}
    nxt = 0
    with open(pcap_path, "wb") as fh:
        w = PcapWriter(fh, LinkType.ETHERNET, SNAP_LEN)
        while nxt < len(flows) or heap:
            if nxt < len(flows) and (not heap or b.flows[flows[nxt]].start <= heap[0][0]):
                fi = flows[nxt]
                fl = b.flows[fi]
                pkts = fl.build(random.Random(fl.seed))
                built[fi] = pkts
                heapq.heappush(heap, (pkts[0][0], nxt, 0, fi))
                nxt += 1
                continue
            ts, order, pi, fi = heapq.heappop(heap)
            pkts = built[fi]
            _, frame, orig, out, err = pkts[pi]
            w.write(ts // US, ts % US, frame, orig)
            total += 1
            if out:
                outbound += 1
            if err is not None:
                erroneous += 1
                plant = b.flows[fi].plant
                if plant is not None:
                    p_int[plant].add(err[0])
                    p_ext[plant].add(err[1])
                    if not p_pkts[plant]:
                        p_win[plant][0] = ts
                    p_pkts[plant] += 1
                    p_win[plant][1] = ts
            if pi + 1 < len(pkts):
                heapq.heappush(heap, (pkts[pi + 1][0], order, pi + 1, fi))
            else:
                del built[fi]

    expected = []
    for i, spec in enumerate(scenario.planted):
        ef = ExpectedFinding(spec.rule_id, len(p_int[i]), len(p_ext[i]), p_pkts[i], (p_win[i][0] / US, p_win[i][1] / US))
        for name, want in spec.expected.items():
            got = getattr(ef, name, None)
            if got != want:
                raise InfeasibleScenario(f"planted {spec.rule_id.value}: {name}={got} but scenario expects {want}")
        expected.append(ef)

    truth = GroundTruth(
        scenario=scenario.name,
        seed=scenario.seed,
        internal_prefixes=list(scenario.internal_prefixes),
        packets=total,
        outbound_pkts=outbound,
        erroneous_pkts=erroneous,
        labels=labels,
        expected_findings=expected,
        planted_erroneous_pkts=sum(p_pkts),
    )
    if truth_path is not None:
        truth.write(truth_path)
    return truth
