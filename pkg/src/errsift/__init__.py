"""Isolate erroneous outbound traffic from packet traces and explain it."""

from .codec import Decoder, PacketRecord, read_pcap, write_pcap
from .detector import DetectorConfig, ErroneousEvent, FlowDetector, FlowKey, Pattern
from .mirror import Pipeline
from .privacy import AnonKey, Pseudonymizer
from .rules import AnomalyFinding, RuleThresholds, run_all

__version__ = "0.1.0"

__all__ = [
    "AnomalyFinding",
    "AnonKey",
    "Decoder",
    "DetectorConfig",
    "ErroneousEvent",
    "FlowDetector",
    "FlowKey",
    "PacketRecord",
    "Pattern",
    "Pipeline",
    "Pseudonymizer",
    "RuleThresholds",
    "read_pcap",
    "run_all",
    "write_pcap",
]
