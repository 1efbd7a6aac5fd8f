"""Match-action offload in front of the flow detector.

Once the detector reaches a verdict for a flow, a rule is installed so later
packets of that flow skip stateful inspection: benign flows get an IGNORE
rule, erroneous flows a LOG rule that forwards their outbound packets to the
logger. Rules only ever shortcut work the detector would have done, so the
log produced with rules enabled is identical to the one produced without.

The logger emits one :class:`~errsift.detector.ErroneousEvent` per erroneous
outbound packet (plus one per ICMP error that quotes no known flow), released
in timestamp order.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import asdict, dataclass
from typing import Iterator

from .codec import Direction, PacketRecord, Proto
from .detector import (
    BENIGN_PHASES,
    ERRONEOUS_PHASES,
    ErroneousEvent,
    FlowDetector,
    FlowKey,
    FlowPhase,
    FlowState,
    Pattern,
    packet_key,
)

DEFAULT_RULE_TTL = 300.0
DEFAULT_REPLAY_BUFFER = 16
DEFAULT_RULE_TABLE_SIZE = 65_536


class Action(enum.Enum):
    LOG = "log"
    IGNORE = "ignore"


class Disposition(enum.Enum):
    LOGGED = "logged"
    IGNORED = "ignored"
    SLOW_PATH = "slow_path"


@dataclass(slots=True, eq=False)
class RuleEntry:
    match: FlowKey
    action: Action
    installed_at: float
    ttl: float
    flow: FlowState
    hits: int = 0

    def expired(self, clock: float) -> bool:
        return self.installed_at + self.ttl < clock


@dataclass
class PipelineCounters:
    fast_path_hits: int = 0
    slow_path_pkts: int = 0
    rules_installed: int = 0
    rules_expired: int = 0
    rules_evicted: int = 0
    logged_pkts: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)

    @property
    def fast_path_fraction(self) -> float:
        offered = self.fast_path_hits + self.slow_path_pkts
        return self.fast_path_hits / offered if offered else 0.0


class RuleTable:
    """Exact-match rules, each reachable from both flow orientations."""

    def __init__(self, capacity: int = DEFAULT_RULE_TABLE_SIZE):
        if capacity <= 0:
            raise ValueError("rule table capacity must be positive")
        self.capacity = capacity
        self._index: dict[FlowKey, RuleEntry] = {}
        self._rules: dict[FlowKey, RuleEntry] = {}

    def __len__(self) -> int:
        return len(self._rules)

    def __iter__(self) -> Iterator[RuleEntry]:
        return iter(self._rules.values())

    def get(self, key: FlowKey) -> RuleEntry | None:
        return self._index.get(key)

    def remove(self, rule: RuleEntry) -> None:
        if self._rules.get(rule.match) is rule:
            del self._rules[rule.match]
            self._index.pop(rule.match, None)
            self._index.pop(rule.match.reversed(), None)

    def install(self, rule: RuleEntry) -> None:
        old = self._rules.get(rule.match)
        if old is not None:
            self.remove(old)
        self._rules[rule.match] = rule
        self._index[rule.match] = rule
        self._index[rule.match.reversed()] = rule

    def reclaim(self, clock: float, is_live) -> tuple[int, int]:
        """Drop expired or orphaned rules; if still full, evict the lowest-hit rule.

        Returns ``(expired, evicted)`` counts.
        """
        stale = [r for r in self._rules.values() if r.expired(clock) or not is_live(r.flow)]
        for r in stale:
            self.remove(r)
        evicted = 0
        if len(self._rules) >= self.capacity:
            victim = min(self._rules.values(), key=lambda r: (r.hits, r.installed_at + r.ttl))
            self.remove(victim)
            evicted = 1
        return len(stale), evicted


class Pipeline:
    """Feeds packets through the rule table and, on a miss, the detector.

    ``replay_buffer`` bounds how many pre-verdict outbound packets of a flow
    are kept so they can be logged once the flow turns out erroneous; set it
    to 0 to log only packets seen after the verdict.
    """

    def __init__(
        self,
        detector: FlowDetector,
        *,
        rules_enabled: bool = True,
        rule_ttl: float = DEFAULT_RULE_TTL,
        replay_buffer: int = DEFAULT_REPLAY_BUFFER,
        rule_table_size: int = DEFAULT_RULE_TABLE_SIZE,
        keep_detector_events: bool = False,
    ):
        if rule_ttl <= 0:
            raise ValueError("rule_ttl must be positive")
        if replay_buffer < 0:
            raise ValueError("replay_buffer must be non-negative")
        self.detector = detector
        self.rules_enabled = rules_enabled
        self.rule_ttl = rule_ttl
        self.replay_cap = replay_buffer
        self.rules = RuleTable(rule_table_size)
        self.counters = PipelineCounters()
        self.detector_events: list[ErroneousEvent] | None = [] if keep_detector_events else None
        self._buffers: dict[FlowKey, deque[tuple[PacketRecord, int]]] = {}
        self._out: list[tuple[tuple, int, ErroneousEvent]] = []
        self._seq = 0
        self._clock = float("-inf")
        self._idle = detector.config.idle_evict
        # Rule lookup index; left empty when rules are disabled.
        self._index = self.rules._index

    # -- packet path ------------------------------------------------------

    def offer(self, pkt: PacketRecord) -> Disposition:
        det = self.detector
        if pkt.ts > self._clock:
            self._clock = pkt.ts
            events = det.advance(pkt.ts)
            if events:
                self._handle(events)
        index = self._index
        if index:
            if pkt.ip_proto is Proto.ICMP:
                key = packet_key(pkt)
            else:
                # Plain tuples hash and compare like FlowKey.
                key = (pkt.src_ip, pkt.dst_ip, pkt.ip_proto, pkt.src_port, pkt.dst_port)
            rule = index.get(key) if key is not None else None
            if rule is not None:
                state = rule.flow
                clock = self._clock
                if (
                    rule.installed_at + rule.ttl < clock
                    or not state.live
                    or state.last_ts < clock - self._idle
                ):
                    self.rules.remove(rule)
                    self.counters.rules_expired += 1
                else:
                    self.counters.fast_path_hits += 1
                    rule.hits += 1
                    det.touch(state, pkt)
                    if rule.action is Action.IGNORE:
                        rule.installed_at = clock
                        return Disposition.IGNORED
                    if pkt.direction is Direction.OUTBOUND:
                        self._log_post_verdict(state, pkt)
                        return Disposition.LOGGED
                    return Disposition.IGNORED
        self.counters.slow_path_pkts += 1
        state, events = det.process(pkt)
        if events:
            self._handle(events)
        if state is None:
            return Disposition.SLOW_PATH
        phase = state.phase
        outbound = pkt.direction is Direction.OUTBOUND
        if phase is FlowPhase.AWAITING_RESPONSE:
            if outbound and not state.inbound_initiated:
                buf = self._buffers.get(state.key)
                if buf is None:
                    buf = self._buffers[state.key] = deque()
                if len(buf) < self.replay_cap:
                    buf.append((pkt, state.fwd_pkts))
            return Disposition.SLOW_PATH
        if self._buffers:
            self._buffers.pop(state.key, None)
        if outbound and phase in ERRONEOUS_PHASES:
            self._log_post_verdict(state, pkt)
        if self.rules_enabled:
            self._install(state)
        return Disposition.SLOW_PATH

    def _install(self, state: FlowState) -> None:
        if state.phase in BENIGN_PHASES:
            action = Action.IGNORE
        elif state.phase in ERRONEOUS_PHASES:
            action = Action.LOG
        else:
            return
        existing = self.rules.get(state.key)
        if existing is not None and existing.flow is state and not existing.expired(self._clock):
            return
        if len(self.rules) >= self.rules.capacity:
            expired, evicted = self.rules.reclaim(self._clock, self.detector.is_live)
            self.counters.rules_expired += expired
            self.counters.rules_evicted += evicted
        self.rules.install(RuleEntry(state.key, action, self._clock, self.rule_ttl, state))
        self.counters.rules_installed += 1

    def _handle(self, events: list[ErroneousEvent]) -> None:
        if not events:
            return
        if self.detector_events is not None:
            self.detector_events.extend(events)
        det = self.detector
        for ev in events:
            pattern = ev.pattern
            if pattern is Pattern.C_ICMP_GENERATED:
                self._emit(ev)
                continue
            if pattern is Pattern.B_ICMP_ELICITED and not ev.correlated:
                self._emit(ev)
                continue
            buf = self._buffers.pop(ev.flow, None)
            if buf:
                # A pending buffer means this event is the flow's verdict.
                for pkt, ordinal in buf:
                    self._log(ev, pkt, ordinal)
            if self.rules_enabled:
                state = det.lookup(ev.flow)
                if state is not None and state.phase in ERRONEOUS_PHASES:
                    self._install(state)

    # -- logger -----------------------------------------------------------

    def _log_post_verdict(self, state: FlowState, pkt: PacketRecord) -> None:
        verdict = state.error if state.phase is FlowPhase.ERRONEOUS_B else None
        self._log(verdict, pkt, state.fwd_pkts)

    def _log(self, verdict: ErroneousEvent | None, pkt: PacketRecord, ordinal: int) -> None:
        key = packet_key(pkt)
        if verdict is not None and verdict.pattern is Pattern.B_ICMP_ELICITED:
            ev = ErroneousEvent(
                Pattern.B_ICMP_ELICITED, pkt.ts, key, verdict.icmp_type, verdict.icmp_code, verdict.inner, ordinal, True,
            )
        else:
            ev = ErroneousEvent(Pattern.A_NO_RESPONSE, pkt.ts, key, pkts_in_flow=ordinal)
        self.counters.logged_pkts += 1
        self._emit(ev)

    def _emit(self, ev: ErroneousEvent) -> None:
        self._seq += 1
        heapq.heappush(self._out, (ev.sort_key(), self._seq, ev))

    def drain(self) -> list[ErroneousEvent]:
        """Release logged events that can no longer be preceded by another."""
        det = self.detector
        watermark = min(det.pending_horizon(), self._clock - det.config.reorder_slack)
        out = self._out
        ready = []
        while out and out[0][0][0] < watermark:
            ready.append(heapq.heappop(out)[2])
        return ready

    def finish(self, end_ts: float | None = None) -> list[ErroneousEvent]:
        """Flush the detector at ``end_ts`` (default: last packet time) and release everything."""
        if end_ts is None:
            end_ts = self._clock
        self._handle(self.detector.flush(end_ts))
        self._buffers.clear()
        out = self._out
        ready = [heapq.heappop(out)[2] for _ in range(len(out))]
        return ready

    def stats(self) -> PipelineCounters:
        return self.counters
