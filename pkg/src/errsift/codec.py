"""Classic pcap reading/writing and IPv4 packet decoding.

Decoded packets are normalized into :class:`PacketRecord` objects tagged with
a traffic direction relative to a configurable set of internal prefixes.
ICMP error messages additionally carry an :class:`InnerQuote` describing the
datagram that triggered them.
"""

from __future__ import annotations

import enum
import ipaddress
import socket
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, NamedTuple, Sequence

MAGIC_MICRO = 0xA1B2C3D4
MAGIC_NANO = 0xA1B23C4D

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
DEFAULT_SNAPLEN = 256
_CHUNK = 1 << 20

ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = (0x8100, 0x88A8, 0x9100)

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10

ICMP_ECHO_REPLY = 0
ICMP_ECHO_REQUEST = 8
# Types whose body quotes the offending datagram.
ICMP_ERROR_TYPES = frozenset({3, 4, 5, 11, 12})


class PcapError(ValueError):
    """Base class for pcap parsing failures."""


class BadMagic(PcapError):
    pass


class TruncatedHeader(PcapError):
    pass


class UnsupportedLinkType(PcapError):
    pass


class LossyTimestampWarning(UserWarning):
    """Nanosecond timestamps were truncated to microseconds on write."""


class LinkType(enum.IntEnum):
    ETHERNET = 1
    RAW_IP = 101


class TsResolution(enum.Enum):
    MICRO = "micro"
    NANO = "nano"

    @property
    def per_second(self) -> int:
        return 1_000_000 if self is TsResolution.MICRO else 1_000_000_000


class Proto(enum.IntEnum):
    ICMP = 1
    TCP = 6
    UDP = 17
    OTHER = 255


_PROTO_BY_NUMBER = {1: Proto.ICMP, 6: Proto.TCP, 17: Proto.UDP}


class Direction(enum.Enum):
    OUTBOUND = "outbound"
    INBOUND = "inbound"
    INTERNAL = "internal"
    TRANSIT = "transit"
    UNKNOWN = "unknown"


class Record(NamedTuple):
    """One captured frame. ``ts_frac`` is in units of the capture resolution."""

    ts_sec: int
    ts_frac: int
    data: bytes
    orig_len: int

    def timestamp(self, resolution: TsResolution = TsResolution.MICRO) -> float:
        return self.ts_sec + self.ts_frac / resolution.per_second


@dataclass
class RawCapture:
    link_type: LinkType = LinkType.ETHERNET
    snap_len: int = DEFAULT_SNAPLEN
    ts_resolution: TsResolution = TsResolution.MICRO
    records: list[Record] = field(default_factory=list)
    version: tuple[int, int] = (2, 4)
    thiszone: int = 0
    sigfigs: int = 0
    # Number of trailing records dropped because the file ended mid-record.
    truncated: int = field(default=0, compare=False)


class _Header(NamedTuple):
    endian: str
    resolution: TsResolution
    version: tuple[int, int]
    thiszone: int
    sigfigs: int
    snap_len: int
    link_type: LinkType


def _parse_global_header(buf: bytes) -> _Header:
    if len(buf) < 4:
        raise TruncatedHeader(f"pcap global header needs 24 bytes, got {len(buf)}")
    magic_le = struct.unpack("<I", buf[:4])[0]
    magic_be = struct.unpack(">I", buf[:4])[0]
    if magic_le in (MAGIC_MICRO, MAGIC_NANO):
        endian, magic = "<", magic_le
    elif magic_be in (MAGIC_MICRO, MAGIC_NANO):
        endian, magic = ">", magic_be
    else:
        raise BadMagic(f"not a classic pcap file (magic {buf[:4].hex()})")
    if len(buf) < GLOBAL_HEADER_LEN:
        raise TruncatedHeader(f"pcap global header needs 24 bytes, got {len(buf)}")
    _, vmaj, vmin, zone, sigfigs, snap, network = struct.unpack(endian + "IHHiIII", buf[:24])
    try:
        link = LinkType(network & 0x0FFFFFFF)
    except ValueError:
        raise UnsupportedLinkType(f"link type {network} is not Ethernet (1) or raw IP (101)") from None
    resolution = TsResolution.MICRO if magic == MAGIC_MICRO else TsResolution.NANO
    return _Header(endian, resolution, (vmaj, vmin), zone, sigfigs, snap, link)


class PcapReader:
    """Sequential reader over a classic pcap stream.

    Iterating yields :class:`Record` objects in file order. A record cut short
    by end-of-file stops iteration and bumps :attr:`truncated` instead of
    raising.
    """

    def __init__(self, fh: BinaryIO):
        self._fh = fh
        hdr = _parse_global_header(fh.read(GLOBAL_HEADER_LEN))
        self.link_type = hdr.link_type
        self.snap_len = hdr.snap_len
        self.ts_resolution = hdr.resolution
        self.version = hdr.version
        self.thiszone = hdr.thiszone
        self.sigfigs = hdr.sigfigs
        self._rec = struct.Struct(hdr.endian + "IIII")
        self.truncated = 0

    def __iter__(self) -> Iterator[Record]:
        read = self._fh.read
        unpack = self._rec.unpack_from
        buf = b""
        pos = 0
        while True:
            if len(buf) - pos < RECORD_HEADER_LEN:
                buf = buf[pos:] + read(_CHUNK)
                pos = 0
                if not buf:
                    return
                if len(buf) < RECORD_HEADER_LEN:
                    self.truncated += 1
                    return
            sec, frac, incl, orig = unpack(buf, pos)
            start = pos + RECORD_HEADER_LEN
            end = start + incl
            if end > len(buf):
                buf = buf[pos:] + read(max(_CHUNK, incl + RECORD_HEADER_LEN))
                pos = 0
                if len(buf) < RECORD_HEADER_LEN + incl:
                    self.truncated += 1
                    return
                continue
            pos = end
            yield Record(sec, frac, buf[start:end], orig)


def read_pcap(path: str | Path) -> RawCapture:
    with open(path, "rb") as fh:
        reader = PcapReader(fh)
        records = list(reader)
    if reader.truncated:
        warnings.warn(f"{path}: dropped {reader.truncated} truncated record(s)", stacklevel=2)
    return RawCapture(
        link_type=reader.link_type,
        snap_len=reader.snap_len,
        ts_resolution=reader.ts_resolution,
        records=records,
        version=reader.version,
        thiszone=reader.thiszone,
        sigfigs=reader.sigfigs,
        truncated=reader.truncated,
    )


class PcapWriter:
    """Streaming microsecond pcap writer in native byte order."""

    def __init__(
        self,
        fh: BinaryIO,
        link_type: LinkType = LinkType.ETHERNET,
        snap_len: int = DEFAULT_SNAPLEN,
        *,
        version: tuple[int, int] = (2, 4),
        thiszone: int = 0,
        sigfigs: int = 0,
    ):
        self._fh = fh
        self.snap_len = snap_len
        self._rec = struct.Struct("=IIII")
        fh.write(struct.pack("=IHHiIII", MAGIC_MICRO, version[0], version[1], thiszone, sigfigs, snap_len, int(link_type)))

    def write(self, ts_sec: int, ts_usec: int, data: bytes, orig_len: int | None = None) -> None:
        if len(data) > self.snap_len:
            raise ValueError(f"record of {len(data)} bytes exceeds snap length {self.snap_len}")
        if orig_len is None:
            orig_len = len(data)
        self._fh.write(self._rec.pack(ts_sec, ts_usec, len(data), orig_len))
        self._fh.write(data)


def write_pcap(capture: RawCapture, path: str | Path) -> None:
    """Write ``capture`` as a microsecond-resolution pcap file.

    Nanosecond captures are truncated to microseconds and a
    :class:`LossyTimestampWarning` is issued when any fraction is lost.
    """
    nano = capture.ts_resolution is TsResolution.NANO
    lossy = False
    with open(path, "wb") as fh:
        writer = PcapWriter(
            fh,
            capture.link_type,
            capture.snap_len,
            version=capture.version,
            thiszone=capture.thiszone,
            sigfigs=capture.sigfigs,
        )
        for rec in capture.records:
            frac = rec.ts_frac
            if nano:
                lossy = lossy or frac % 1000 != 0
                frac //= 1000
            writer.write(rec.ts_sec, frac, rec.data, rec.orig_len)
    if lossy:
        warnings.warn(f"{path}: nanosecond timestamps truncated to microseconds", LossyTimestampWarning, stacklevel=2)


# --------------------------------------------------------------------------
# Decoding


class UndecodableReason(enum.Enum):
    NON_IP = "non_ip"
    IPV6 = "ipv6"
    TRUNCATED = "truncated"
    BAD_HEADER = "bad_header"
    FRAGMENT = "fragment"


@dataclass(frozen=True, slots=True)
class Undecodable:
    reason: UndecodableReason
    ts: float = 0.0


@dataclass(frozen=True, slots=True)
class InnerQuote:
    """Original datagram quoted inside an ICMP error.

    For a quoted ICMP echo request the identifier stands in for
    ``orig_src_port`` so the quote keys onto the echo flow.
    """

    orig_src_ip: str
    orig_dst_ip: str
    orig_proto: Proto
    orig_src_port: int
    orig_dst_port: int
    quoted_bytes: int = field(default=0, compare=False)


@dataclass(slots=True)
class PacketRecord:
    ts: float
    src_ip: str
    dst_ip: str
    ip_proto: Proto
    src_port: int = 0
    dst_port: int = 0
    tcp_flags: int = 0
    icmp_type: int | None = None
    icmp_code: int | None = None
    icmp_id: int | None = None
    embedded: InnerQuote | None = None
    l4_payload_len: int = 0
    direction: Direction = Direction.UNKNOWN

    @property
    def is_icmp_error(self) -> bool:
        return self.icmp_type in ICMP_ERROR_TYPES


def parse_prefixes(prefixes: Iterable[str | ipaddress.IPv4Network]) -> tuple[ipaddress.IPv4Network, ...]:
    nets = []
    for p in prefixes:
        net = p if isinstance(p, ipaddress.IPv4Network) else ipaddress.IPv4Network(str(p).strip(), strict=False)
        nets.append(net)
    return tuple(nets)


_PORTS = struct.Struct("!HH")
_inet_ntoa = socket.inet_ntoa
# Indexed by (source internal, destination internal).
_DIRECTIONS = (
    (Direction.TRANSIT, Direction.INBOUND),
    (Direction.OUTBOUND, Direction.INTERNAL),
)


# total length, flags/fragment, protocol, source, destination
_FAST_IP = struct.Struct("!2xH2xH1xB2xII")
_U32 = struct.Struct("!I")
_ADDR_CACHE_MAX = 1 << 20


class Decoder:
    """Stateful wrapper around :func:`decode` that keeps per-reason counts."""

    def __init__(self, internal_prefixes: Iterable[str | ipaddress.IPv4Network], link_type: LinkType = LinkType.ETHERNET):
        self.prefixes = parse_prefixes(internal_prefixes)
        self._masks = [(int(n.network_address), int(n.netmask)) for n in self.prefixes]
        self.link_type = LinkType(link_type)
        self._eth = self.link_type is LinkType.ETHERNET
        self._addr: dict[int, str] = {}
        self.seen = 0
        self.rejected: dict[UndecodableReason, int] = {r: 0 for r in UndecodableReason}

    def is_internal(self, addr: int) -> bool:
        for net, mask in self._masks:
            if addr & mask == net:
                return True
        return False

    def direction(self, src: int, dst: int) -> Direction:
        return _DIRECTIONS[self.is_internal(src)][self.is_internal(dst)]

    def decode(self, ts: float, data: bytes) -> PacketRecord | Undecodable:
        try:
            result = self._decode(ts, data)
        except (struct.error, IndexError):
            result = Undecodable(UndecodableReason.TRUNCATED, ts)
        if result.__class__ is Undecodable:
            self.rejected[result.reason] += 1
        return result

    @property
    def decoded(self) -> int:
        return self.seen - sum(self.rejected.values())

    def _name(self, value: int) -> str:
        # Shared string objects keep hashing cheap downstream.
        if len(self._addr) >= _ADDR_CACHE_MAX:
            self._addr.clear()
        name = self._addr[value] = _inet_ntoa(_U32.pack(value))
        return name

    def _slow_header(self, ts: float, data: bytes) -> tuple[int, int] | Undecodable:
        n = len(data)
        off = 0
        if self._eth:
            if n < ETH_HEADER_LEN:
                return Undecodable(UndecodableReason.TRUNCATED, ts)
            etype = (data[12] << 8) | data[13]
            off = ETH_HEADER_LEN
            while etype in ETHERTYPE_VLAN:
                if n < off + 4:
                    return Undecodable(UndecodableReason.TRUNCATED, ts)
                etype = (data[off + 2] << 8) | data[off + 3]
                off += 4
            if etype != ETHERTYPE_IPV4:
                if etype == ETHERTYPE_IPV6:
                    return Undecodable(UndecodableReason.IPV6, ts)
                return Undecodable(UndecodableReason.NON_IP, ts)
        if n < off + 20:
            return Undecodable(UndecodableReason.TRUNCATED, ts)
        vihl = data[off]
        if vihl >> 4 != 4:
            if vihl >> 4 == 6 and not self._eth:
                return Undecodable(UndecodableReason.IPV6, ts)
            return Undecodable(UndecodableReason.BAD_HEADER, ts)
        ihl = (vihl & 0x0F) * 4
        if ihl < 20:
            return Undecodable(UndecodableReason.BAD_HEADER, ts)
        if n < off + ihl:
            return Undecodable(UndecodableReason.TRUNCATED, ts)
        return off, ihl

    def _decode(self, ts: float, data: bytes) -> PacketRecord | Undecodable:
        self.seen += 1
        n = len(data)
        if self._eth and n >= 34 and data[14] == 0x45 and data[12] == 8 and data[13] == 0:
            # Untagged Ethernet, option-less IPv4: the overwhelmingly common case.
            off = ETH_HEADER_LEN
            ihl = 20
            total_len, frag, proto_num, src_i, dst_i = _FAST_IP.unpack_from(data, off)
        else:
            hdr = self._slow_header(ts, data)
            if hdr.__class__ is Undecodable:
                return hdr
            off, ihl = hdr
            total_len, frag, proto_num, src_i, dst_i = _FAST_IP.unpack_from(data, off)
        if frag & 0x1FFF:
            return Undecodable(UndecodableReason.FRAGMENT, ts)
        if total_len < ihl:
            return Undecodable(UndecodableReason.BAD_HEADER, ts)
        addr = self._addr
        src = addr.get(src_i)
        if src is None:
            src = self._name(src_i)
        dst = addr.get(dst_i)
        if dst is None:
            dst = self._name(dst_i)
        s_in = d_in = False
        for net, mask in self._masks:
            if src_i & mask == net:
                s_in = True
            if dst_i & mask == net:
                d_in = True
        direction = _DIRECTIONS[s_in][d_in]
        l4 = off + ihl
        # Bytes actually available for the L4 header: bounded by capture and IP length.
        end = off + total_len
        avail = (n if n < end else end) - l4
        ip_payload = total_len - ihl

        if proto_num == 6:
            if avail < 20:
                return Undecodable(UndecodableReason.TRUNCATED, ts)
            doff = (data[l4 + 12] >> 4) * 4
            if doff < 20:
                return Undecodable(UndecodableReason.BAD_HEADER, ts)
            sport, dport = _PORTS.unpack_from(data, l4)
            payload = ip_payload - doff
            return PacketRecord(
                ts, src, dst, Proto.TCP, sport, dport, data[l4 + 13],
                None, None, None, None, payload if payload > 0 else 0, direction,
            )
        if proto_num == 17:
            if avail < 8:
                return Undecodable(UndecodableReason.TRUNCATED, ts)
            sport, dport = _PORTS.unpack_from(data, l4)
            payload = ip_payload - 8
            return PacketRecord(
                ts, src, dst, Proto.UDP, sport, dport, 0,
                None, None, None, None, payload if payload > 0 else 0, direction,
            )
        pkt = PacketRecord(
            ts, src, dst, _PROTO_BY_NUMBER.get(proto_num, Proto.OTHER), direction=direction,
        )
        if proto_num == 1:
            if avail < 8:
                return Undecodable(UndecodableReason.TRUNCATED, ts)
            itype = data[l4]
            pkt.icmp_type = itype
            pkt.icmp_code = data[l4 + 1]
            pkt.l4_payload_len = max(ip_payload - 8, 0)
            if itype == ICMP_ECHO_REQUEST or itype == ICMP_ECHO_REPLY:
                pkt.icmp_id = (data[l4 + 4] << 8) | data[l4 + 5]
            elif itype in ICMP_ERROR_TYPES:
                pkt.embedded = parse_quote(data, l4 + 8, l4 + avail)
        else:
            pkt.l4_payload_len = ip_payload
        return pkt


def parse_quote(data: bytes, start: int, end: int) -> InnerQuote | None:
    """Parse the quoted datagram in ``data[start:end]``; None if it does not parse."""
    if end - start < 20:
        return None
    vihl = data[start]
    ihl = (vihl & 0x0F) * 4
    if vihl >> 4 != 4 or ihl < 20 or end - start < ihl:
        return None
    proto_num = data[start + 9]
    proto = _PROTO_BY_NUMBER.get(proto_num, Proto.OTHER)
    src = _inet_ntoa(data[start + 12 : start + 16])
    dst = _inet_ntoa(data[start + 16 : start + 20])
    l4 = start + ihl
    quoted_l4 = end - l4
    sport = dport = 0
    if quoted_l4 >= 8:
        if proto is Proto.TCP or proto is Proto.UDP:
            sport, dport = _PORTS.unpack_from(data, l4)
        elif proto is Proto.ICMP and data[l4] == ICMP_ECHO_REQUEST:
            sport = (data[l4 + 4] << 8) | data[l4 + 5]
    return InnerQuote(src, dst, proto, sport, dport, end - start)


def decode(
    raw: tuple[float, bytes],
    link_type: LinkType | int,
    internal_prefixes: Sequence[str | ipaddress.IPv4Network],
) -> PacketRecord | Undecodable:
    """Decode one ``(timestamp, bytes)`` frame. Convenience wrapper over :class:`Decoder`."""
    ts, data = raw
    return Decoder(internal_prefixes, LinkType(link_type)).decode(ts, data)


# --------------------------------------------------------------------------
# Encoding helpers (used by the synthetic generator and tests)


def checksum(data: bytes) -> int:
    """RFC 1071 ones'-complement checksum."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


_ETH_IPV4 = bytes.fromhex("020000000002" "020000000001" "0800")


def ipv4_header(src: str, dst: str, proto: int, payload_len: int, ident: int = 0, ttl: int = 64) -> bytes:
    hdr = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, 20 + payload_len, ident & 0xFFFF, 0x4000, ttl, proto, 0,
        socket.inet_aton(src), socket.inet_aton(dst),
    )
    return hdr[:10] + struct.pack("!H", checksum(hdr)) + hdr[12:]


def tcp_header(sport: int, dport: int, flags: int, seq: int = 0, ack: int = 0, window: int = 65535) -> bytes:
    return struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF, 5 << 4, flags, window, 0, 0)


def udp_header(sport: int, dport: int, payload_len: int) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + payload_len, 0)


def icmp_message(itype: int, code: int, rest: bytes = b"\x00\x00\x00\x00", body: bytes = b"") -> bytes:
    msg = struct.pack("!BBH", itype, code, 0) + rest + body
    return msg[:2] + struct.pack("!H", checksum(msg)) + msg[4:]


def ethernet(ip_packet: bytes) -> bytes:
    return _ETH_IPV4 + ip_packet


def build_ipv4(src: str, dst: str, proto: int, l4: bytes, payload_len: int = 0, ident: int = 0) -> bytes:
    """IPv4 datagram with header ``l4`` claiming ``payload_len`` further bytes.

    Only the headers are materialized; the payload is represented by zero
    bytes so callers can truncate to a snap length.
    """
    return ipv4_header(src, dst, proto, len(l4) + payload_len, ident) + l4 + bytes(payload_len)

