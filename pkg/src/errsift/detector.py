"""Stateful detection of erroneous outbound traffic.

Three patterns are recognized for traffic leaving the internal prefixes:

* ``A_NO_RESPONSE``: an outbound-initiated flow sees no reverse packet
  before its response deadline.
* ``B_ICMP_ELICITED``: an external ICMP error quotes an outbound flow.
* ``C_ICMP_GENERATED``: an internal host emits an ICMP error toward an
  external address.

The detector runs on a virtual clock (the largest timestamp seen so far).
Deadlines fire lazily whenever the clock advances.
"""

from __future__ import annotations

import dataclasses
import enum
import heapq
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

from .codec import (
    ICMP_ECHO_REPLY,
    ICMP_ECHO_REQUEST,
    TCP_ACK,
    TCP_RST,
    TCP_SYN,
    Direction,
    InnerQuote,
    PacketRecord,
    Proto,
    UndecodableReason,
    parse_prefixes,
)


class FlowKey(NamedTuple):
    initiator_ip: str
    responder_ip: str
    proto: Proto
    initiator_port: int
    responder_port: int

    def reversed(self) -> FlowKey:
        return FlowKey(self.responder_ip, self.initiator_ip, self.proto, self.responder_port, self.initiator_port)

    def __str__(self) -> str:
        return f"{self.proto.name} {self.initiator_ip}:{self.initiator_port}>{self.responder_ip}:{self.responder_port}"

    @classmethod
    def parse(cls, text: str) -> FlowKey:
        proto, rest = text.split(" ", 1)
        a, b = rest.split(">")
        ip_a, port_a = a.rsplit(":", 1)
        ip_b, port_b = b.rsplit(":", 1)
        return cls(ip_a, ip_b, Proto[proto], int(port_a), int(port_b))


class Pattern(enum.Enum):
    A_NO_RESPONSE = "A"
    B_ICMP_ELICITED = "B"
    C_ICMP_GENERATED = "C"


class FlowPhase(enum.Enum):
    AWAITING_RESPONSE = "awaiting_response"
    BIDIRECTIONAL = "bidirectional"
    ERRONEOUS_A = "erroneous_a"
    ERRONEOUS_B = "erroneous_b"
    REFUSED = "refused"


ERRONEOUS_PHASES = frozenset({FlowPhase.ERRONEOUS_A, FlowPhase.ERRONEOUS_B})
BENIGN_PHASES = frozenset({FlowPhase.BIDIRECTIONAL, FlowPhase.REFUSED})

SWEEP_INTERVAL = 1.0


@dataclass(frozen=True)
class ErroneousEvent:
    pattern: Pattern
    ts: float
    flow: FlowKey
    icmp_type: int | None = None
    icmp_code: int | None = None
    inner: InnerQuote | None = None
    pkts_in_flow: int = 0
    correlated: bool = False
    anon: bool = False
    evicted_early: bool = field(default=False, compare=False)

    def sort_key(self) -> tuple:
        """Total order used everywhere events are merged: ts, pattern, flow, rest."""
        inner = self.inner
        return (
            self.ts,
            self.pattern.value,
            self.flow.initiator_ip,
            self.flow.responder_ip,
            int(self.flow.proto),
            self.flow.initiator_port,
            self.flow.responder_port,
            -1 if self.icmp_type is None else self.icmp_type,
            -1 if self.icmp_code is None else self.icmp_code,
            ("", "", -1, -1, -1) if inner is None else (
                inner.orig_src_ip, inner.orig_dst_ip, int(inner.orig_proto), inner.orig_src_port, inner.orig_dst_port,
            ),
            self.pkts_in_flow,
            self.correlated,
            self.anon,
        )


@dataclass(slots=True, eq=False)
class FlowState:
    key: FlowKey
    phase: FlowPhase
    first_ts: float
    last_ts: float
    fwd_pkts: int = 0
    rev_pkts: int = 0
    deadline: float | None = None
    # True when the first packet came from an external host; such flows are
    # never subject to the response deadline.
    inbound_initiated: bool = False
    syn_only: bool = True
    late_replies: int = 0
    # ICMP error that moved the flow to ERRONEOUS_B.
    error: ErroneousEvent | None = None
    live: bool = True


@dataclass
class DetectorConfig:
    internal_prefixes: list[str] = field(default_factory=list)
    t_resp: float = 10.0
    idle_evict: float = 120.0
    max_flows: int = 1_048_576
    reorder_slack: float = 1.0
    treat_rst_as_refused: bool = True
    recent_flow_memory: float = 60.0

    def __post_init__(self) -> None:
        if not 0 < self.t_resp <= self.idle_evict:
            raise ValueError(f"need 0 < t_resp <= idle_evict, got t_resp={self.t_resp} idle_evict={self.idle_evict}")
        if self.max_flows <= 0:
            raise ValueError("max_flows must be positive")
        if self.reorder_slack < 0 or self.recent_flow_memory < 0:
            raise ValueError("reorder_slack and recent_flow_memory must be non-negative")
        parse_prefixes(self.internal_prefixes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DetectorConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> DetectorConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class DetectorCounters:
    packets_seen: int = 0
    outbound_pkts: int = 0
    inbound_pkts: int = 0
    internal_pkts: int = 0
    transit_pkts: int = 0
    non_ip: int = 0
    undecodable: int = 0
    erroneous_pkts: int = 0
    benign_pkts: int = 0
    # Outbound packets of flows still awaiting a verdict.
    pending_pkts: int = 0
    indeterminate: int = 0
    indeterminate_pkts: int = 0
    evictions: int = 0
    refused_flows: int = 0
    late_replies: int = 0
    uncorrelated_errors: int = 0
    events_a: int = 0
    events_b: int = 0
    events_c: int = 0

    def as_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)

    @property
    def erroneous_ratio(self) -> float:
        return self.erroneous_pkts / self.outbound_pkts if self.outbound_pkts else 0.0


def packet_key(pkt: PacketRecord) -> FlowKey | None:
    """Flow key oriented as ``pkt`` travels, or None for untracked ICMP."""
    proto = pkt.ip_proto
    if proto is Proto.ICMP:
        if pkt.icmp_type == ICMP_ECHO_REQUEST:
            return FlowKey(pkt.src_ip, pkt.dst_ip, proto, pkt.icmp_id, 0)
        if pkt.icmp_type == ICMP_ECHO_REPLY:
            return FlowKey(pkt.src_ip, pkt.dst_ip, proto, 0, pkt.icmp_id)
        return None
    return FlowKey(pkt.src_ip, pkt.dst_ip, proto, pkt.src_port, pkt.dst_port)


def quote_key(inner: InnerQuote) -> FlowKey:
    return FlowKey(inner.orig_src_ip, inner.orig_dst_ip, inner.orig_proto, inner.orig_src_port, inner.orig_dst_port)


class FlowDetector:
    """Single-writer flow table classifying outbound traffic.

    ``process`` handles one packet and returns the flow it was attributed
    to (if any) together with the events it produced. Events produced by
    deadline expiry carry the deadline as their timestamp.
    """

    def __init__(self, config: DetectorConfig):
        self.config = config
        self.flows: OrderedDict[FlowKey, FlowState] = OrderedDict()
        # key -> (phase, time it left the table); used to correlate late ICMP errors.
        self.recent: OrderedDict[FlowKey, tuple[FlowPhase, float]] = OrderedDict()
        self.refused: list[tuple[float, FlowKey]] = []
        self.counters = DetectorCounters()
        self.clock = float("-inf")
        self._deadlines: list[tuple[float, int, FlowState]] = []
        self._next_sweep = float("-inf")
        self._seq = 0

    # -- public API -------------------------------------------------------

    def ingest(self, pkt: PacketRecord, clock: float | None = None) -> list[ErroneousEvent]:
        if clock is not None:
            self.advance(clock)
        return self.process(pkt)[1]

    def advance(self, clock: float) -> list[ErroneousEvent]:
        """Move the virtual clock forward, firing deadlines and evicting idle flows."""
        events: list[ErroneousEvent] = []
        if clock <= self.clock:
            return events
        self.clock = clock
        cfg = self.config
        dl = self._deadlines
        if dl and dl[0][0] < clock - cfg.reorder_slack:
            horizon = clock - cfg.reorder_slack
            while dl and dl[0][0] < horizon:
                deadline, _, state = heapq.heappop(dl)
                if state.phase is FlowPhase.AWAITING_RESPONSE and state.deadline == deadline:
                    events.append(self._fire(state, deadline))
        if clock >= self._next_sweep:
            # Idle flows are also caught lazily on lookup, so sweeping at a
            # coarse interval only bounds memory.
            self._next_sweep = clock + SWEEP_INTERVAL
            idle_cutoff = clock - cfg.idle_evict
            flows = self.flows
            while flows:
                key, state = next(iter(flows.items()))
                if state.last_ts >= idle_cutoff:
                    break
                self._retire(key, state)
            recent = self.recent
            recent_cutoff = clock - cfg.recent_flow_memory
            while recent:
                key, (_, left) = next(iter(recent.items()))
                if left >= recent_cutoff:
                    break
                del recent[key]
        return events

    def process(self, pkt: PacketRecord) -> tuple[FlowState | None, list[ErroneousEvent]]:
        events = self.advance(pkt.ts) if pkt.ts > self.clock else []
        c = self.counters
        c.packets_seen += 1
        direction = pkt.direction
        if direction is Direction.OUTBOUND:
            c.outbound_pkts += 1
            if pkt.is_icmp_error:
                c.erroneous_pkts += 1
                c.events_c += 1
                events.append(
                    ErroneousEvent(
                        Pattern.C_ICMP_GENERATED, pkt.ts, FlowKey(pkt.src_ip, pkt.dst_ip, Proto.ICMP, 0, 0),
                        pkt.icmp_type, pkt.icmp_code, pkt.embedded, 1,
                    )
                )
                return None, events
            key = packet_key(pkt)
            if key is None:
                c.benign_pkts += 1
                return None, events
            state = self._lookup(key)
            if state is not None:
                self._forward(state, pkt, True)
                return state, events
            state = self._lookup(key.reversed())
            if state is not None:
                self._reverse(state, pkt, True)
                return state, events
            return self._open(key, pkt, False, events), events
        if direction is Direction.INBOUND:
            c.inbound_pkts += 1
            if pkt.is_icmp_error:
                events.append(self._elicited(pkt))
                return None, events
            key = packet_key(pkt)
            if key is None:
                return None, events
            state = self._lookup(key.reversed())
            if state is not None:
                self._reverse(state, pkt, False)
                return state, events
            state = self._lookup(key)
            if state is not None:
                self._forward(state, pkt, False)
                return state, events
            return self._open(key, pkt, True, events), events
        if direction is Direction.INTERNAL:
            c.internal_pkts += 1
        else:
            c.transit_pkts += 1
        return None, events

    def touch(self, state: FlowState, pkt: PacketRecord) -> None:
        """Account a packet already matched to ``state`` (fast-path sync).

        Only flows with a verdict are matched by rules, so this is the
        bookkeeping ``process`` would do for such a flow, minus the lookups.
        """
        c = self.counters
        c.packets_seen += 1
        if pkt.ts > state.last_ts:
            state.last_ts = pkt.ts
        self.flows.move_to_end(state.key)
        phase = state.phase
        if pkt.direction is Direction.OUTBOUND:
            c.outbound_pkts += 1
            if pkt.src_ip == state.key[0]:
                state.fwd_pkts += 1
                if phase in ERRONEOUS_PHASES:
                    c.erroneous_pkts += 1
                else:
                    c.benign_pkts += 1
                return
            c.benign_pkts += 1
        else:
            c.inbound_pkts += 1
            if pkt.src_ip == state.key[0]:
                state.fwd_pkts += 1
                return
        if phase is FlowPhase.ERRONEOUS_A:
            state.late_replies += 1
            c.late_replies += 1
        else:
            state.rev_pkts += 1

    def flush(self, end_ts: float) -> list[ErroneousEvent]:
        """End-of-trace: fire deadlines up to ``end_ts``; the rest are indeterminate."""
        events: list[ErroneousEvent] = []
        c = self.counters
        for deadline, _, state in sorted(self._deadlines, key=lambda d: (d[0], d[1])):
            if state.phase is not FlowPhase.AWAITING_RESPONSE or state.deadline != deadline:
                continue
            if deadline <= end_ts:
                events.append(self._fire(state, deadline))
            else:
                state.deadline = None
                c.indeterminate += 1
                c.indeterminate_pkts += state.fwd_pkts
                c.pending_pkts -= state.fwd_pkts
        self._deadlines.clear()
        return events

    def count_undecodable(self, reason: UndecodableReason) -> None:
        self.counters.packets_seen += 1
        if reason is UndecodableReason.NON_IP:
            self.counters.non_ip += 1
        else:
            self.counters.undecodable += 1

    def lookup(self, key: FlowKey) -> FlowState | None:
        return self._lookup(key)

    def is_live(self, state: FlowState) -> bool:
        return state.live and state.last_ts >= self.clock - self.config.idle_evict

    def pending_horizon(self) -> float:
        """Earliest first-packet time among flows still awaiting a verdict."""
        dl = self._deadlines
        while dl:
            deadline, _, state = dl[0]
            if state.phase is FlowPhase.AWAITING_RESPONSE and state.deadline == deadline:
                return state.first_ts
            heapq.heappop(dl)
        return float("inf")

    # -- internals --------------------------------------------------------

    def _lookup(self, key: FlowKey) -> FlowState | None:
        state = self.flows.get(key)
        if state is not None and state.last_ts < self.clock - self.config.idle_evict:
            self._retire(key, state)
            return None
        return state

    def _retire(self, key: FlowKey, state: FlowState) -> None:
        del self.flows[key]
        state.live = False
        if not state.inbound_initiated:
            self.recent[key] = (state.phase, self.clock)
            self.recent.move_to_end(key)

    def _open(self, key: FlowKey, pkt: PacketRecord, inbound: bool, events: list[ErroneousEvent]) -> FlowState:
        c = self.counters
        if len(self.flows) >= self.config.max_flows:
            old_key, old = next(iter(self.flows.items()))
            c.evictions += 1
            if old.phase is FlowPhase.AWAITING_RESPONSE and not old.inbound_initiated:
                events.append(self._fire(old, self.clock, evicted=True))
            self._retire(old_key, old)
        ts = pkt.ts
        state = FlowState(key, FlowPhase.AWAITING_RESPONSE, ts, ts, 1, inbound_initiated=inbound)
        state.syn_only = pkt.ip_proto is Proto.TCP and pkt.tcp_flags & (TCP_SYN | TCP_ACK) == TCP_SYN
        self.flows[key] = state
        if inbound:
            return state
        state.deadline = ts + self.config.t_resp
        self._seq += 1
        heapq.heappush(self._deadlines, (state.deadline, self._seq, state))
        c.pending_pkts += 1
        return state

    def _forward(self, state: FlowState, pkt: PacketRecord, outbound: bool) -> None:
        if pkt.ts > state.last_ts:
            state.last_ts = pkt.ts
        self.flows.move_to_end(state.key)
        state.fwd_pkts += 1
        if state.syn_only and not (pkt.ip_proto is Proto.TCP and pkt.tcp_flags & (TCP_SYN | TCP_ACK) == TCP_SYN):
            state.syn_only = False
        if not outbound:
            return
        c = self.counters
        phase = state.phase
        if phase is FlowPhase.AWAITING_RESPONSE:
            c.pending_pkts += 1
        elif phase in ERRONEOUS_PHASES:
            c.erroneous_pkts += 1
        else:
            c.benign_pkts += 1

    def _reverse(self, state: FlowState, pkt: PacketRecord, outbound: bool) -> None:
        if pkt.ts > state.last_ts:
            state.last_ts = pkt.ts
        self.flows.move_to_end(state.key)
        c = self.counters
        phase = state.phase
        if outbound:
            # Internal host answering an externally initiated flow.
            c.benign_pkts += 1
        if phase is FlowPhase.AWAITING_RESPONSE:
            state.rev_pkts += 1
            state.deadline = None
            if (
                self.config.treat_rst_as_refused
                and state.syn_only
                and not state.inbound_initiated
                and pkt.ip_proto is Proto.TCP
                and pkt.tcp_flags & TCP_RST
            ):
                state.phase = FlowPhase.REFUSED
                c.refused_flows += 1
                self.refused.append((pkt.ts, state.key))
            else:
                state.phase = FlowPhase.BIDIRECTIONAL
            if not state.inbound_initiated:
                c.pending_pkts -= state.fwd_pkts
                c.benign_pkts += state.fwd_pkts
        elif phase is FlowPhase.ERRONEOUS_A:
            state.late_replies += 1
            c.late_replies += 1
        else:
            state.rev_pkts += 1

    def _fire(self, state: FlowState, deadline: float, evicted: bool = False) -> ErroneousEvent:
        c = self.counters
        state.phase = FlowPhase.ERRONEOUS_A
        state.deadline = None
        c.pending_pkts -= state.fwd_pkts
        c.erroneous_pkts += state.fwd_pkts
        c.events_a += 1
        return ErroneousEvent(Pattern.A_NO_RESPONSE, deadline, state.key, pkts_in_flow=state.fwd_pkts, evicted_early=evicted)

    def _elicited(self, pkt: PacketRecord) -> ErroneousEvent:
        c = self.counters
        c.events_b += 1
        inner = pkt.embedded
        if inner is None:
            c.uncorrelated_errors += 1
            return ErroneousEvent(
                Pattern.B_ICMP_ELICITED, pkt.ts, FlowKey(pkt.dst_ip, pkt.src_ip, Proto.ICMP, 0, 0),
                pkt.icmp_type, pkt.icmp_code, None, 0, False,
            )
        key = quote_key(inner)
        state = self._lookup(key)
        if state is not None and not state.inbound_initiated:
            pkts = state.fwd_pkts
            if state.phase is FlowPhase.AWAITING_RESPONSE:
                state.phase = FlowPhase.ERRONEOUS_B
                state.deadline = None
                c.pending_pkts -= pkts
                c.erroneous_pkts += pkts
            ev = ErroneousEvent(Pattern.B_ICMP_ELICITED, pkt.ts, key, pkt.icmp_type, pkt.icmp_code, inner, pkts, True)
            if state.error is None and state.phase is FlowPhase.ERRONEOUS_B:
                state.error = ev
            return ev
        if key in self.recent:
            return ErroneousEvent(Pattern.B_ICMP_ELICITED, pkt.ts, key, pkt.icmp_type, pkt.icmp_code, inner, 0, True)
        c.uncorrelated_errors += 1
        return ErroneousEvent(Pattern.B_ICMP_ELICITED, pkt.ts, key, pkt.icmp_type, pkt.icmp_code, inner, 0, False)

