"""Shared fixtures: generated corpora are built once per session."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from errsift import cli, events, synth
from errsift.codec import Direction, PacketRecord, Proto
from errsift.detector import ErroneousEvent

DATA = Path(__file__).parent / "data"
INTERNAL = ["10.0.0.0/16"]
KEY_HEX = "00112233445566778899aabbccddeeff" * 2


@dataclass
class Corpus:
    pcap: Path
    truth: synth.GroundTruth
    events_path: Path
    stats: dict
    filter_seconds: float
    events: list[ErroneousEvent] = field(default_factory=list)


def run_filter(pcap: Path, out: Path, *extra: str) -> tuple[dict, float]:
    t0 = time.perf_counter()
    rc = cli.main(["filter", "--in", str(pcap), "--internal", ",".join(INTERNAL), "--out", str(out), *extra])
    elapsed = time.perf_counter() - t0
    assert rc == 0
    return json.loads(cli.sidecar_path(out).read_text()), elapsed


def _build(tmp: Path, preset: str, *extra: str) -> Corpus:
    pcap = tmp / f"{preset}.pcap"
    truth = synth.generate(synth.Scenario.preset(preset), pcap, tmp / f"{preset}.truth.json")
    ev_path = tmp / f"{preset}.jsonl"
    stats, secs = run_filter(pcap, ev_path, "--no-anon", *extra)
    return Corpus(pcap, truth, ev_path, stats, secs, events.read_all(ev_path))


@pytest.fixture(scope="session")
def table1(tmp_path_factory) -> Corpus:
    return _build(tmp_path_factory.mktemp("table1"), "preset-table1-scaled")


@pytest.fixture(scope="session")
def background(tmp_path_factory) -> Corpus:
    return _build(tmp_path_factory.mktemp("background"), "preset-background-only")


@pytest.fixture(scope="session")
def ratio(tmp_path_factory) -> Corpus:
    return _build(tmp_path_factory.mktemp("ratio"), "preset-ratio-0p06")


def pkt(ts, src, dst, proto=Proto.UDP, sport=0, dport=0, *, flags=0, direction=None, **kw) -> PacketRecord:
    """Hand-built packet; direction defaults from the 10.0.0.0/8 convention used in unit tests."""
    if direction is None:
        s_in, d_in = src.startswith("10."), dst.startswith("10.")
        direction = {
            (True, False): Direction.OUTBOUND,
            (False, True): Direction.INBOUND,
            (True, True): Direction.INTERNAL,
            (False, False): Direction.TRANSIT,
        }[(s_in, d_in)]
    return PacketRecord(ts, src, dst, proto, sport, dport, flags, direction=direction, **kw)


def log_labels(evs) -> dict[str, str]:
    """Per-flow pattern as seen in the event log; a flow carrying two patterns is an error."""
    out: dict[str, str] = {}
    for e in evs:
        k = str(e.flow)
        if out.setdefault(k, e.pattern.value) != e.pattern.value:
            raise AssertionError(f"flow {k} logged as both {out[k]} and {e.pattern.value}")
    return out


def truth_labels(truth, wanted=("A", "B", "C")) -> dict[str, str]:
    return {k: v for k, v in truth.labels.items() if v in wanted}


# Acceptance verdicts, echoed in the terminal summary so they survive output capture.
VERDICTS: list[str] = []


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
