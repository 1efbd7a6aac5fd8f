"""Pseudonymization of internal addresses and L4 payload truncation.

Internal addresses keep the bits of the internal prefix they fall in; the host
bits are run through a keyed Feistel permutation, so each prefix maps onto
itself bijectively. External addresses pass through untouched.
"""

from __future__ import annotations

import dataclasses
import hashlib
import ipaddress
import os
import socket
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

from .codec import (
    ETH_HEADER_LEN,
    ETHERTYPE_IPV4,
    ETHERTYPE_VLAN,
    ICMP_ERROR_TYPES,
    LinkType,
    checksum,
    parse_prefixes,
)
from .detector import ErroneousEvent, FlowKey

ENV_KEY = "ERRSIFT_ANON_KEY"
KEY_LEN = 32
FEISTEL_ROUNDS = 8


class AnonKeyError(ValueError):
    """Malformed anonymization key material."""


@dataclass(frozen=True)
class AnonKey:
    key_bytes: bytes
    internal_prefixes: tuple[ipaddress.IPv4Network, ...]

    def __post_init__(self) -> None:
        if len(self.key_bytes) != KEY_LEN:
            raise AnonKeyError(f"anonymization key must be {KEY_LEN} bytes, got {len(self.key_bytes)}")

    def __repr__(self) -> str:
        # Never leak key material into logs or tracebacks.
        return f"AnonKey(<redacted>, {[str(p) for p in self.internal_prefixes]})"

    @classmethod
    def from_hex(cls, text: str, internal_prefixes: Iterable[str]) -> AnonKey:
        try:
            raw = bytes.fromhex(text.strip())
        except ValueError:
            raise AnonKeyError("anonymization key is not valid hex") from None
        return cls(raw, parse_prefixes(internal_prefixes))

    @classmethod
    def from_file(cls, path: str | Path, internal_prefixes: Iterable[str]) -> AnonKey:
        """Load a key file holding 64 hex characters or 32 raw bytes."""
        data = Path(path).read_bytes()
        if len(data) == KEY_LEN:
            return cls(data, parse_prefixes(internal_prefixes))
        return cls.from_hex(data.decode("ascii", errors="replace"), internal_prefixes)

    @classmethod
    def from_env(cls, internal_prefixes: Iterable[str]) -> AnonKey | None:
        text = os.environ.get(ENV_KEY)
        if not text:
            return None
        return cls.from_hex(text, internal_prefixes)


class Pseudonymizer:
    """Caching, keyed prefix-preserving address mapper."""

    def __init__(self, key: AnonKey):
        self.key = key
        # Longest prefix first so nested prefixes resolve to the most specific one.
        nets = sorted(key.internal_prefixes, key=lambda n: n.prefixlen, reverse=True)
        self._nets = [(int(n.network_address), int(n.netmask), 32 - n.prefixlen, n.prefixlen) for n in nets]
        self._cache: dict[str, str] = {}

    def __call__(self, addr: str) -> str:
        out = self._cache.get(addr)
        if out is None:
            out = self._cache[addr] = self._map(addr)
        return out

    def _map(self, addr: str) -> str:
        value = struct.unpack("!I", socket.inet_aton(addr))[0]
        for net, mask, host_bits, plen in self._nets:
            if value & mask == net:
                host = _feistel(self.key.key_bytes, net, plen, host_bits, value & ~mask & 0xFFFFFFFF)
                return socket.inet_ntoa(struct.pack("!I", net | host))
        return addr

    def event(self, ev: ErroneousEvent) -> ErroneousEvent:
        f = ev.flow
        flow = FlowKey(self(f.initiator_ip), self(f.responder_ip), f.proto, f.initiator_port, f.responder_port)
        inner = ev.inner
        if inner is not None:
            inner = dataclasses.replace(inner, orig_src_ip=self(inner.orig_src_ip), orig_dst_ip=self(inner.orig_dst_ip))
        return dataclasses.replace(ev, flow=flow, inner=inner, anon=True)


def _round_value(key: bytes, net: int, plen: int, rnd: int, half: int, bits: int) -> int:
    if bits == 0:
        return 0
    msg = struct.pack("!IBBI", net, plen, rnd, half)
    digest = hashlib.blake2b(msg, key=key, digest_size=8).digest()
    return int.from_bytes(digest, "big") & ((1 << bits) - 1)


def _feistel(key: bytes, net: int, plen: int, n_bits: int, x: int) -> int:
    """Keyed permutation of ``n_bits``-bit integers (alternating unbalanced Feistel)."""
    if n_bits == 0:
        return x
    r_bits = n_bits // 2
    l_bits = n_bits - r_bits
    left = x >> r_bits
    right = x & ((1 << r_bits) - 1)
    for rnd in range(FEISTEL_ROUNDS):
        if rnd % 2 == 0:
            left ^= _round_value(key, net, plen, rnd, right, l_bits)
        else:
            right ^= _round_value(key, net, plen, rnd, left, r_bits)
    return (left << r_bits) | right


def pseudonymize(addr: str, key: AnonKey) -> str:
    """Map ``addr`` under ``key``. Build a :class:`Pseudonymizer` for bulk use."""
    return Pseudonymizer(key)(addr)


# --------------------------------------------------------------------------
# Payload truncation


class Truncated(NamedTuple):
    data: bytes
    payload_len: int


def truncate_payload(frame: bytes, link_type: LinkType = LinkType.ETHERNET) -> Truncated:
    """Strip the L4 payload from ``frame``, keeping every header.

    ICMP errors keep the quoted IP header plus 8 bytes of the quoted L4
    header. Length fields are rewritten and checksums recomputed so the
    result still parses. ``payload_len`` is the number of payload bytes the
    original packet declared.
    """
    off = 0
    if link_type == LinkType.ETHERNET:
        etype = struct.unpack_from("!H", frame, 12)[0]
        off = ETH_HEADER_LEN
        while etype in ETHERTYPE_VLAN:
            etype = struct.unpack_from("!H", frame, off + 2)[0]
            off += 4
        if etype != ETHERTYPE_IPV4:
            raise ValueError("truncate_payload needs an IPv4 frame")
    if len(frame) < off + 20 or frame[off] >> 4 != 4:
        raise ValueError("truncate_payload needs a decodable IPv4 packet")
    ihl = (frame[off] & 0x0F) * 4
    total_len, frag = struct.unpack_from("!H2xH", frame, off + 2)
    proto = frame[off + 9]
    l4 = off + ihl
    ip_payload = total_len - ihl
    avail = min(len(frame), off + total_len) - l4

    keep = 0
    if frag & 0x1FFF:
        keep = 0
    elif proto == 6 and avail >= 20:
        keep = (frame[l4 + 12] >> 4) * 4
    elif proto == 17 and avail >= 8:
        keep = 8
    elif proto == 1 and avail >= 8:
        keep = 8
        if frame[l4] in ICMP_ERROR_TYPES and avail >= 28:
            inner_ihl = (frame[l4 + 8] & 0x0F) * 4
            keep = min(8 + inner_ihl + 8, avail)
    keep = min(keep, avail)
    payload_len = max(ip_payload - keep, 0) if proto != 1 else max(ip_payload - 8, 0)
    if keep == ip_payload:
        # Nothing to strip: leave the frame byte-identical.
        return Truncated(frame, payload_len)

    ip_hdr = bytearray(frame[off:l4])
    seg = bytearray(frame[l4 : l4 + keep])
    struct.pack_into("!H", ip_hdr, 2, ihl + keep)
    struct.pack_into("!H", ip_hdr, 10, 0)
    struct.pack_into("!H", ip_hdr, 10, checksum(bytes(ip_hdr)))
    if not frag & 0x1FFF:
        if proto == 17 and keep == 8:
            struct.pack_into("!H", seg, 4, 8)
            struct.pack_into("!H", seg, 6, 0)
            struct.pack_into("!H", seg, 6, _pseudo_checksum(ip_hdr, 17, seg) or 0xFFFF)
        elif proto == 6 and keep >= 20:
            struct.pack_into("!H", seg, 16, 0)
            struct.pack_into("!H", seg, 16, _pseudo_checksum(ip_hdr, 6, seg))
        elif proto == 1 and keep >= 8:
            struct.pack_into("!H", seg, 2, 0)
            struct.pack_into("!H", seg, 2, checksum(bytes(seg)))
    return Truncated(frame[:off] + bytes(ip_hdr) + bytes(seg), payload_len)


def _pseudo_checksum(ip_hdr: bytearray, proto: int, seg: bytearray) -> int:
    pseudo = bytes(ip_hdr[12:20]) + struct.pack("!BBH", 0, proto, len(seg))
    return checksum(pseudo + bytes(seg))
