"""Command-line entry point: ``errsift filter|analyze|detect|synth``.

Exit codes: 0 success, 2 bad input, 3 findings present (``detect
--fail-on-findings`` only). Diagnostics go to stderr; machine-readable
output goes to stdout and files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import analytics, events, rules, synth
from .codec import Decoder, PcapError, PcapReader, Undecodable
from .detector import DetectorConfig, ErroneousEvent, FlowDetector
from .mirror import DEFAULT_REPLAY_BUFFER, DEFAULT_RULE_TABLE_SIZE, DEFAULT_RULE_TTL, Pipeline
from .privacy import ENV_KEY, AnonKey, AnonKeyError, Pseudonymizer

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FINDINGS = 3

DRAIN_MASK = 1023


class InputError(Exception):
    pass


@dataclass
class MirrorOptions:
    rules_enabled: bool = True
    rule_ttl: float = DEFAULT_RULE_TTL
    replay_buffer: int = DEFAULT_REPLAY_BUFFER
    rule_table_size: int = DEFAULT_RULE_TABLE_SIZE


def load_config(path: str | Path | None, internal: Sequence[str]) -> tuple[DetectorConfig, MirrorOptions]:
    """Read a filter config: detector fields at top level, pipeline knobs under ``"mirror"``."""
    data: dict = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
    mirror = data.pop("mirror", {})
    data["internal_prefixes"] = list(internal)
    return DetectorConfig.from_dict(data), MirrorOptions(**mirror)


def sidecar_path(events_path: str | Path) -> Path:
    return Path(events_path).with_suffix(".counters.json")


def filter_trace(
    pcap_path: str | Path,
    config: DetectorConfig,
    sink: Callable[[ErroneousEvent], None],
    mirror: MirrorOptions | None = None,
    anon: Pseudonymizer | None = None,
) -> dict:
    """Run a pcap through decoder, rule table and detector, passing logged events to ``sink`` in order.

    Returns the counters of every stage.
    """
    mirror = mirror or MirrorOptions()
    det = FlowDetector(config)
    pipe = Pipeline(
        det,
        rules_enabled=mirror.rules_enabled,
        rule_ttl=mirror.rule_ttl,
        replay_buffer=mirror.replay_buffer,
        rule_table_size=mirror.rule_table_size,
    )

    def emit(batch: list[ErroneousEvent]) -> None:
        for ev in batch:
            sink(anon.event(ev) if anon is not None else ev)

    with open(pcap_path, "rb") as fh:
        reader = PcapReader(fh)
        decoder = Decoder(config.internal_prefixes, reader.link_type)
        per_second = reader.ts_resolution.per_second
        decode = decoder.decode
        offer = pipe.offer
        n = 0
        for sec, frac, data, _ in reader:
            pkt = decode(sec + frac / per_second, data)
            if pkt.__class__ is Undecodable:
                det.count_undecodable(pkt.reason)
            else:
                offer(pkt)
            n += 1
            if not n & DRAIN_MASK:
                emit(pipe.drain())
        emit(pipe.finish())
    return {
        "detector": det.counters.as_dict(),
        "pipeline": pipe.counters.as_dict(),
        "decoder": {
            "decoded": decoder.decoded,
            "rejected": {r.value: c for r, c in decoder.rejected.items()},
            "truncated_records": reader.truncated,
        },
    }


def _anonymizer(args: argparse.Namespace, internal: Sequence[str]) -> Pseudonymizer | None:
    if args.no_anon:
        return None
    if args.anon_key_file:
        key = AnonKey.from_file(args.anon_key_file, internal)
    else:
        key = AnonKey.from_env(internal)
        if key is None:
            raise InputError(f"no anonymization key: pass --anon-key-file, set {ENV_KEY}, or use --no-anon")
    return Pseudonymizer(key)


def cmd_filter(args: argparse.Namespace) -> int:
    internal = [p.strip() for p in args.internal.split(",") if p.strip()]
    if not internal:
        raise InputError("--internal needs at least one CIDR")
    config, mirror = load_config(args.config, internal)
    anon = _anonymizer(args, internal)
    with events.EventWriter(args.out) as writer:
        stats = filter_trace(args.inp, config, writer.append, mirror, anon)
    text = json.dumps(stats, indent=2, sort_keys=True)
    sidecar_path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.mirror_stats:
        Path(args.mirror_stats).write_text(json.dumps(stats["pipeline"], indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    evs = events.read_all(args.events)
    side = sidecar_path(args.events)
    counters = json.loads(side.read_text(encoding="utf-8"))["detector"] if side.exists() else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analytics.write_timeline_csv(analytics.timeline(evs, args.bin_width), out / "timeline.csv")
    analytics.write_cdf_csv(analytics.sender_cdf(evs), out / "senders_cdf.csv")
    report = analytics.summary(counters, evs)
    analytics.write_summary_json(report, out / "summary.json")
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    evs = events.read_all(args.events)
    th = rules.RuleThresholds.from_json(args.thresholds) if args.thresholds else rules.RuleThresholds()
    deny = rules.load_denylist(args.denylist) if args.denylist else ()
    report = rules.run_all(evs, th, deny)
    rules.write_findings(report, args.out)
    print(json.dumps({
        "findings": len(report.findings),
        "explained_fraction": report.explained_fraction,
        "rules": sorted({f.rule_id.value for f in report.findings}),
    }, sort_keys=True))
    if args.fail_on_findings and report.findings:
        return EXIT_FINDINGS
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    scenario = synth.Scenario.preset(args.preset) if args.preset else synth.Scenario.from_json(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    truth = synth.generate(scenario, args.out, args.truth)
    print(json.dumps({
        "scenario": truth.scenario,
        "packets": truth.packets,
        "outbound_pkts": truth.outbound_pkts,
        "erroneous_pkts": truth.erroneous_pkts,
        "flows": len(truth.labels),
    }, sort_keys=True))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="errsift", description="Log and analyse erroneous outbound traffic in packet traces.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("filter", help="reduce a pcap to an erroneous-event log")
    f.add_argument("--in", dest="inp", required=True, help="input pcap")
    f.add_argument("--internal", required=True, help="comma-separated internal CIDRs")
    f.add_argument("--out", required=True, help="output events.jsonl")
    f.add_argument("--config", help="JSON detector config")
    f.add_argument("--anon-key-file", help=f"pseudonymization key file (default: ${ENV_KEY})")
    f.add_argument("--no-anon", action="store_true", help="keep internal addresses in clear")
    f.add_argument("--mirror-stats", help="write rule-table counters to this JSON file")
    f.set_defaults(func=cmd_filter)

    a = sub.add_parser("analyze", help="timeline, sender CDF and summary")
    a.add_argument("--events", required=True)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--bin-width", type=float, default=analytics.DEFAULT_BIN_WIDTH, help="seconds (default 3600)")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("detect", help="run anomaly rules over an event log")
    d.add_argument("--events", required=True)
    d.add_argument("--thresholds", help="JSON threshold overrides")
    d.add_argument("--denylist", help="file with one CIDR or address per line")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--fail-on-findings", action="store_true", help="exit 3 when any finding is reported")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("synth", help="generate a labelled synthetic trace")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help=", ".join(synth.PRESETS))
    src.add_argument("--scenario", help="scenario JSON file")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output pcap")
    s.add_argument("--truth", required=True, help="output ground-truth JSON")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, OSError, PcapError, AnonKeyError, synth.InfeasibleScenario, events.EventStoreError,
            json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
        print(f"errsift {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
