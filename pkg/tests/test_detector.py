import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errsift.codec import TCP_ACK, TCP_RST, TCP_SYN, Direction, InnerQuote, Proto, UndecodableReason
from errsift.detector import DetectorConfig, FlowDetector, FlowKey, FlowPhase, Pattern

from .conftest import pkt

CFG = DetectorConfig(internal_prefixes=["10.0.0.0/8"])


def det(**kw) -> FlowDetector:
    return FlowDetector(DetectorConfig(internal_prefixes=["10.0.0.0/8"], **kw))


def feed(d, pkts, end=None):
    out = []
    for p in pkts:
        out += d.ingest(p)
    if end is not None:
        out += d.flush(end)
    return out


def test_unanswered_ntp_fires_at_deadline():
    d = det()
    evs = feed(d, [pkt(0.0, "10.0.0.7", "8.8.4.4", Proto.UDP, 40000, 123), pkt(20.0, "10.0.0.8", "1.2.3.4", Proto.UDP, 1, 2)])
    assert len(evs) == 1
    ev = evs[0]
    assert ev.pattern is Pattern.A_NO_RESPONSE
    assert ev.ts == 10.0
    assert ev.flow == FlowKey("10.0.0.7", "8.8.4.4", Proto.UDP, 40000, 123)
    assert ev.icmp_type is None and ev.icmp_code is None


def test_answered_query_is_benign():
    d = det()
    evs = feed(d, [
        pkt(0.0, "10.0.0.7", "8.8.8.8", Proto.UDP, 5353, 53),
        pkt(1.5, "8.8.8.8", "10.0.0.7", Proto.UDP, 53, 5353),
    ], end=100.0)
    assert evs == []
    assert d.lookup(FlowKey("10.0.0.7", "8.8.8.8", Proto.UDP, 5353, 53)).phase is FlowPhase.BIDIRECTIONAL
    assert d.counters.benign_pkts == 1


def test_elicited_icmp_is_correlated():
    d = det()
    inner = InnerQuote("10.0.0.9", "9.9.9.9", Proto.UDP, 41000, 53)
    evs = feed(d, [
        pkt(0.0, "10.0.0.9", "9.9.9.9", Proto.UDP, 41000, 53),
        pkt(1.0, "9.9.9.9", "10.0.0.9", Proto.ICMP, icmp_type=3, icmp_code=3, embedded=inner),
    ], end=100.0)
    assert len(evs) == 1
    ev = evs[0]
    assert ev.pattern is Pattern.B_ICMP_ELICITED and ev.correlated
    assert (ev.icmp_type, ev.icmp_code) == (3, 3)
    assert d.counters.erroneous_pkts == 1


def test_uncorrelated_icmp_error():
    d = det()
    inner = InnerQuote("10.0.0.9", "9.9.9.9", Proto.UDP, 1, 53)
    (ev,) = feed(d, [pkt(0.0, "9.9.9.9", "10.0.0.9", Proto.ICMP, icmp_type=3, icmp_code=1, embedded=inner)])
    assert ev.pattern is Pattern.B_ICMP_ELICITED and not ev.correlated
    assert d.counters.uncorrelated_errors == 1


def test_icmp_error_for_recently_retired_flow_correlates():
    d = det(idle_evict=30.0)
    inner = InnerQuote("10.0.0.9", "9.9.9.9", Proto.UDP, 41000, 53)
    evs = feed(d, [
        pkt(0.0, "10.0.0.9", "9.9.9.9", Proto.UDP, 41000, 53),
        pkt(0.5, "9.9.9.9", "10.0.0.9", Proto.UDP, 53, 41000),
        pkt(40.0, "10.0.0.1", "10.0.0.2", Proto.UDP, 1, 2),
        pkt(41.0, "9.9.9.9", "10.0.0.9", Proto.ICMP, icmp_type=3, icmp_code=3, embedded=inner),
    ])
    assert [e.correlated for e in evs] == [True]


def test_internally_generated_icmp():
    d = det()
    quote = InnerQuote("1.1.1.1", "10.0.0.9", Proto.UDP, 3333, 500)
    evs = feed(d, [
        pkt(0.0, "1.1.1.1", "10.0.0.9", Proto.UDP, 3333, 500),
        pkt(0.001, "10.0.0.9", "1.1.1.1", Proto.ICMP, icmp_type=3, icmp_code=3, embedded=quote),
    ], end=100.0)
    assert len(evs) == 1
    ev = evs[0]
    assert ev.pattern is Pattern.C_ICMP_GENERATED
    assert ev.flow.initiator_ip == "10.0.0.9" and ev.flow.responder_ip == "1.1.1.1"
    assert ev.inner == quote


def test_flush_before_deadline_is_indeterminate():
    d = det()
    feed(d, [pkt(0.0, "10.0.0.5", "1.2.3.4", Proto.TCP, 5555, 25, flags=TCP_SYN)])
    assert d.flush(3.0) == []
    assert d.counters.indeterminate == 1
    assert d.counters.indeterminate_pkts == 1


def test_flush_after_deadline_fires():
    d = det()
    feed(d, [pkt(0.0, "10.0.0.5", "1.2.3.4", Proto.TCP, 5555, 25, flags=TCP_SYN)])
    evs = d.flush(30.0)
    assert [e.pattern for e in evs] == [Pattern.A_NO_RESPONSE]
    assert d.counters.indeterminate == 0


def test_empty():
    d = det()
    assert d.flush(0.0) == []
    assert all(v == 0 for v in d.counters.as_dict().values())


def test_rst_to_syn_is_refused_not_erroneous():
    d = det()
    evs = feed(d, [
        pkt(0.0, "10.0.0.5", "1.2.3.4", Proto.TCP, 5555, 23, flags=TCP_SYN),
        pkt(0.1, "1.2.3.4", "10.0.0.5", Proto.TCP, 23, 5555, flags=TCP_RST | TCP_ACK),
    ], end=100.0)
    assert evs == []
    assert d.counters.refused_flows == 1
    assert d.refused == [(0.1, FlowKey("10.0.0.5", "1.2.3.4", Proto.TCP, 5555, 23))]


def test_rst_handling_can_be_disabled():
    d = det(treat_rst_as_refused=False)
    feed(d, [
        pkt(0.0, "10.0.0.5", "1.2.3.4", Proto.TCP, 5555, 23, flags=TCP_SYN),
        pkt(0.1, "1.2.3.4", "10.0.0.5", Proto.TCP, 23, 5555, flags=TCP_RST | TCP_ACK),
    ])
    assert d.lookup(FlowKey("10.0.0.5", "1.2.3.4", Proto.TCP, 5555, 23)).phase is FlowPhase.BIDIRECTIONAL


def test_late_reply_does_not_refire():
    d = det()
    evs = feed(d, [
        pkt(0.0, "10.0.0.7", "8.8.4.4", Proto.UDP, 1, 123),
        pkt(15.0, "10.0.0.7", "8.8.4.4", Proto.UDP, 1, 123),
        pkt(16.0, "8.8.4.4", "10.0.0.7", Proto.UDP, 123, 1),
    ], end=200.0)
    assert [e.pattern for e in evs] == [Pattern.A_NO_RESPONSE]
    assert d.counters.late_replies == 1
    assert d.counters.erroneous_pkts == 2


def test_reordered_reply_within_slack_counts():
    d = det()
    evs = feed(d, [
        pkt(0.0, "10.0.0.7", "8.8.4.4", Proto.UDP, 1, 123),
        pkt(10.5, "8.8.4.4", "10.0.0.7", Proto.UDP, 123, 1),
    ], end=20.0)
    assert evs == []


def test_inbound_initiated_flow_never_fires():
    d = det()
    evs = feed(d, [pkt(0.0, "5.5.5.5", "10.0.0.2", Proto.TCP, 1000, 22, flags=TCP_SYN)], end=1000.0)
    assert evs == []


def test_internal_and_transit_not_classified():
    d = det()
    evs = feed(d, [
        pkt(0.0, "10.0.0.1", "10.0.0.2", Proto.UDP, 1, 2),
        pkt(0.0, "5.5.5.5", "6.6.6.6", Proto.UDP, 1, 2),
    ], end=100.0)
    assert evs == []
    c = d.counters
    assert (c.internal_pkts, c.transit_pkts, c.outbound_pkts) == (1, 1, 0)


def test_echo_pairing_by_identifier():
    d = det()
    evs = feed(d, [
        pkt(0.0, "10.0.0.3", "4.4.4.4", Proto.ICMP, icmp_type=8, icmp_code=0, icmp_id=77),
        pkt(0.2, "4.4.4.4", "10.0.0.3", Proto.ICMP, icmp_type=0, icmp_code=0, icmp_id=77),
        pkt(1.0, "10.0.0.3", "4.4.4.4", Proto.ICMP, icmp_type=8, icmp_code=0, icmp_id=78),
    ], end=100.0)
    assert [e.flow.initiator_port for e in evs] == [78]


def test_table_full_evicts_oldest_with_flag():
    d = det(max_flows=2)
    evs = feed(d, [
        pkt(0.0, "10.0.0.1", "8.8.8.8", Proto.UDP, 1, 53),
        pkt(0.1, "10.0.0.2", "8.8.8.8", Proto.UDP, 1, 53),
        pkt(0.2, "10.0.0.3", "8.8.8.8", Proto.UDP, 1, 53),
    ])
    assert d.counters.evictions == 1
    assert len(evs) == 1 and evs[0].evicted_early
    assert evs[0].flow.initiator_ip == "10.0.0.1"


def test_undecodable_counts():
    d = det()
    d.count_undecodable(UndecodableReason.NON_IP)
    d.count_undecodable(UndecodableReason.FRAGMENT)
    c = d.counters
    assert (c.packets_seen, c.non_ip, c.undecodable) == (2, 1, 1)


@pytest.mark.parametrize("bad", [dict(t_resp=0), dict(t_resp=200, idle_evict=100), dict(max_flows=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        DetectorConfig(internal_prefixes=["10.0.0.0/8"], **bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        DetectorConfig.from_dict({"t_resp": 5, "bogus": 1})


def test_flow_key_text_round_trip():
    k = FlowKey("10.0.0.1", "8.8.8.8", Proto.UDP, 5, 53)
    assert FlowKey.parse(str(k)) == k
    assert k.reversed().reversed() == k


# -- brute-force oracle --------------------------------------------------

HOSTS = ["10.0.0.1", "10.0.0.2", "8.8.8.8", "9.9.9.9"]
SLACK = CFG.reorder_slack
T_RESP = CFG.t_resp

packet_st = st.tuples(st.integers(0, 60), st.sampled_from(HOSTS), st.sampled_from(HOSTS), st.sampled_from([1, 2]), st.sampled_from([1, 2]))


def oracle(packets):
    """Straight transcription of the state machine: which flows get a pattern-A event."""
    flows = {}
    for ts, s, d, sp, dp in packets:
        k, r = (s, d, sp, dp), (d, s, dp, sp)
        if k in flows:
            continue
        if r in flows:
            f = flows[r]
            if f["first_reply"] is None:
                f["first_reply"] = ts
            continue
        outbound = s.startswith("10.") and not d.startswith("10.")
        inbound = d.startswith("10.") and not s.startswith("10.")
        if outbound or inbound:
            flows[k] = {"start": ts, "first_reply": None, "outbound": outbound}
    end = packets[-1][0] if packets else 0
    fired = set()
    for k, f in flows.items():
        if not f["outbound"]:
            continue
        deadline = f["start"] + T_RESP
        reply = f["first_reply"]
        if reply is not None and reply - SLACK <= deadline:
            continue
        if deadline <= end or reply is not None:
            fired.add(k)
    return fired


@settings(max_examples=300, deadline=None)
@given(st.lists(packet_st, max_size=40))
def test_pattern_a_matches_oracle_exactly_once(raw):
    packets = sorted(p for p in raw if p[1] != p[2])
    d = FlowDetector(CFG)
    evs = []
    for ts, s, dst, sp, dp in packets:
        evs += d.ingest(pkt(float(ts), s, dst, Proto.UDP, sp, dp))
    evs += d.flush(float(packets[-1][0]) if packets else 0.0)
    a_keys = [(e.flow.initiator_ip, e.flow.responder_ip, e.flow.initiator_port, e.flow.responder_port)
              for e in evs if e.pattern is Pattern.A_NO_RESPONSE]
    assert len(a_keys) == len(set(a_keys))
    assert set(a_keys) == oracle(packets)

    c = d.counters
    assert c.packets_seen == c.outbound_pkts + c.inbound_pkts + c.internal_pkts + c.transit_pkts + c.non_ip + c.undecodable
    assert c.pending_pkts == 0
    assert c.erroneous_pkts + c.benign_pkts + c.indeterminate_pkts == c.outbound_pkts
    for state in d.flows.values():
        if state.rev_pkts:
            assert state.phase in (FlowPhase.BIDIRECTIONAL, FlowPhase.ERRONEOUS_B, FlowPhase.REFUSED)
        if state.phase is FlowPhase.ERRONEOUS_A:
            assert state.rev_pkts == 0
        if state.phase is not FlowPhase.AWAITING_RESPONSE:
            assert state.deadline is None


@settings(max_examples=100, deadline=None)
@given(st.lists(packet_st, max_size=40))
def test_deterministic_and_nearly_monotone(raw):
    packets = sorted(p for p in raw if p[1] != p[2])

    def run():
        d = FlowDetector(CFG)
        out = []
        for ts, s, dst, sp, dp in packets:
            out += d.ingest(pkt(float(ts), s, dst, Proto.UDP, sp, dp))
        return out

    a, b = run(), run()
    assert a == b
    high = float("-inf")
    for e in a:
        assert e.ts >= high - SLACK
        high = max(high, e.ts)
    for e in a:
        if e.pattern is Pattern.C_ICMP_GENERATED:
            assert e.icmp_type is not None


def test_direction_field_drives_classification():
    d = det()
    p = pkt(0.0, "10.0.0.1", "8.8.8.8", Proto.UDP, 1, 2, direction=Direction.TRANSIT)
    assert d.ingest(p) == [] and d.counters.transit_pkts == 1
