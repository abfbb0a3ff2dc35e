"""Ethernet/IPv4/TCP/UDP parsing, serialization and checksum arithmetic.

Wire formats follow RFC 791, RFC 793 and RFC 768 (big-endian fields).
All functions here are pure; header objects are frozen dataclasses and
"modifying" one means building a copy with :func:`dataclasses.replace`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
PROTO_TCP = 6
PROTO_UDP = 17

_ETH = struct.Struct("!6s6sH")
_IPV4 = struct.Struct("!BBHHHBBHII")
_TCP = struct.Struct("!HHIIHHHH")
_UDP = struct.Struct("!HHHH")


class CodecError(ValueError):
    """Base class for packet decoding/encoding failures."""


class TruncatedPacket(CodecError):
    pass


class MalformedHeader(CodecError):
    pass


class InconsistentHeaders(CodecError):
    pass


@dataclass(frozen=True)
class EthernetHeader:
    dst_mac: bytes = b"\x00" * 6
    src_mac: bytes = b"\x00" * 6
    ethertype: int = ETHERTYPE_IPV4

    def pack(self) -> bytes:
        return _ETH.pack(self.dst_mac, self.src_mac, self.ethertype)


@dataclass(frozen=True)
class Ipv4Header:
    src_addr: int
    dst_addr: int
    protocol: int = PROTO_TCP
    total_length: int = 20
    ttl: int = 64
    identification: int = 0
    flags_fragment: int = 0
    dscp_ecn: int = 0
    header_checksum: int = 0
    version: int = 4
    ihl: int = 5
    options: bytes = b""

    @property
    def header_len(self) -> int:
        return self.ihl * 4

    def pack(self, checksum: Optional[int] = None) -> bytes:
        csum = self.header_checksum if checksum is None else checksum
        return (
            _IPV4.pack(
                (self.version << 4) | self.ihl,
                self.dscp_ecn,
                self.total_length,
                self.identification,
                self.flags_fragment,
                self.ttl,
                self.protocol,
                csum,
                self.src_addr,
                self.dst_addr,
            )
            + self.options
        )


@dataclass(frozen=True)
class TcpHeader:
    src_port: int
    dst_port: int
    seq: int = 0
    ack: int = 0
    flags: int = 0
    window: int = 65535
    checksum: int = 0
    urgent: int = 0
    data_offset: int = 5
    options: bytes = b""

    @property
    def header_len(self) -> int:
        return self.data_offset * 4

    def pack(self, checksum: Optional[int] = None) -> bytes:
        csum = self.checksum if checksum is None else checksum
        return (
            _TCP.pack(
                self.src_port,
                self.dst_port,
                self.seq,
                self.ack,
                (self.data_offset << 12) | (self.flags & 0x0FFF),
                self.window,
                csum,
                self.urgent,
            )
            + self.options
        )


# TCP flag bits (low byte of the 12-bit flags field)
TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


@dataclass(frozen=True)
class UdpHeader:
    src_port: int
    dst_port: int
    length: int = 8
    checksum: int = 0

    header_len = 8

    def pack(self, checksum: Optional[int] = None) -> bytes:
        csum = self.checksum if checksum is None else checksum
        return _UDP.pack(self.src_port, self.dst_port, self.length, csum)


Transport = Union[TcpHeader, UdpHeader]


@dataclass(frozen=True)
class PacketHeaders:
    """Parsed header stack of one frame.

    ``payload`` holds the bytes after the last parsed header, bounded by the
    IPv4 total length when IPv4 is present. ``trailer`` keeps any link-layer
    padding found past the IPv4 total length so frames roundtrip exactly.
    """

    ethernet: EthernetHeader
    ipv4: Optional[Ipv4Header] = None
    transport: Optional[Transport] = None
    payload: bytes = b""
    trailer: bytes = field(default=b"", repr=False)

    @property
    def tcp(self) -> Optional[TcpHeader]:
        return self.transport if isinstance(self.transport, TcpHeader) else None

    @property
    def udp(self) -> Optional[UdpHeader]:
        return self.transport if isinstance(self.transport, UdpHeader) else None


def evolve(obj, **changes):
    """``dataclasses.replace`` for the header classes, minus the per-call
    introspection (they have no ``__post_init__`` to re-run)."""
    new = object.__new__(obj.__class__)
    d = new.__dict__
    d.update(obj.__dict__)
    d.update(changes)
    return new


def _new(cls, **values):
    """Construct a frozen header from a complete field set without the
    per-field ``object.__setattr__`` of the generated ``__init__``."""
    new = object.__new__(cls)
    new.__dict__.update(values)
    return new


# ---------------------------------------------------------------------------
# checksums


def ones_complement_sum(data: bytes, start: int = 0) -> int:
    """Folded 16-bit one's-complement sum of ``data`` (zero padded if odd).

    2**16 == 1 (mod 0xFFFF), so the end-around-carry sum of the big-endian
    words is the whole buffer read as one integer, reduced mod 0xFFFF; a
    non-zero input that reduces to 0 folds to 0xFFFF.
    """
    if len(data) % 2:
        data = data + b"\x00"
    value = int.from_bytes(data, "big") + start
    if not value:
        return 0
    return value % 0xFFFF or 0xFFFF


def checksum_adjust(checksum: int, old_word: int, new_word: int) -> int:
    """Incrementally update a checksum for one changed 16-bit word (RFC 1624, eqn. 3)."""
    total = (~checksum & 0xFFFF) + (~old_word & 0xFFFF) + new_word
    total = (total & 0xFFFF) + (total >> 16)
    total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ipv4_checksum(header: Ipv4Header) -> int:
    return ~ones_complement_sum(header.pack(checksum=0)) & 0xFFFF


_PSEUDO = struct.Struct("!IIBBH")


def _pseudo_header(ip: Ipv4Header, protocol: int, length: int) -> bytes:
    return _PSEUDO.pack(ip.src_addr, ip.dst_addr, 0, protocol, length)


def tcp_checksum(ip: Ipv4Header, tcp: TcpHeader, payload: bytes) -> int:
    segment = tcp.pack(checksum=0) + payload
    pseudo = _pseudo_header(ip, PROTO_TCP, len(segment))
    return ~ones_complement_sum(pseudo + segment) & 0xFFFF


def udp_checksum(ip: Ipv4Header, udp: UdpHeader, payload: bytes) -> int:
    """UDP checksum; a computed 0 is transmitted as 0xFFFF (RFC 768)."""
    datagram = udp.pack(checksum=0) + payload
    pseudo = _pseudo_header(ip, PROTO_UDP, len(datagram))
    csum = ~ones_complement_sum(pseudo + datagram) & 0xFFFF
    return csum or 0xFFFF


def verify_ipv4(header: Ipv4Header) -> bool:
    return ones_complement_sum(header.pack()) == 0xFFFF


def verify_tcp(ip: Ipv4Header, tcp: TcpHeader, payload: bytes) -> bool:
    segment = tcp.pack() + payload
    return ones_complement_sum(_pseudo_header(ip, PROTO_TCP, len(segment)) + segment) == 0xFFFF


def verify_udp(ip: Ipv4Header, udp: UdpHeader, payload: bytes) -> bool:
    if udp.checksum == 0:
        return True
    datagram = udp.pack() + payload
    return ones_complement_sum(_pseudo_header(ip, PROTO_UDP, len(datagram)) + datagram) == 0xFFFF


def verify_checksums(headers: PacketHeaders) -> bool:
    """True if every checksum present in the stack verifies."""
    ip = headers.ipv4
    if ip is None:
        return True
    if not verify_ipv4(ip):
        return False
    t = headers.transport
    if isinstance(t, TcpHeader):
        return verify_tcp(ip, t, headers.payload)
    if isinstance(t, UdpHeader):
        return verify_udp(ip, t, headers.payload)
    return True


def verify_frame(frame: bytes) -> bool:
    """:func:`verify_checksums` computed straight from the bytes of a frame
    that :func:`parse_packet` accepts, without re-packing any header."""
    if len(frame) < ETH_HEADER_LEN + 20 or frame[12:14] != b"\x08\x00":
        return True
    ip_off = ETH_HEADER_LEN
    hlen = (frame[ip_off] & 0x0F) * 4
    if ones_complement_sum(frame[ip_off: ip_off + hlen]) != 0xFFFF:
        return False
    if int.from_bytes(frame[ip_off + 6: ip_off + 8], "big") & 0x1FFF:
        return True
    proto = frame[ip_off + 9]
    if proto == PROTO_UDP:
        if frame[ip_off + hlen + 6: ip_off + hlen + 8] == b"\x00\x00":
            return True
    elif proto != PROTO_TCP:
        return True
    end = ip_off + int.from_bytes(frame[ip_off + 2: ip_off + 4], "big")
    seg_len = end - ip_off - hlen
    # the pseudo header is word aligned, so its words simply add to the segment's
    pseudo = frame[ip_off + 12: ip_off + 20] + bytes((0, proto)) + seg_len.to_bytes(2, "big")
    return ones_complement_sum(frame[ip_off + hlen: end], int.from_bytes(pseudo, "big")) == 0xFFFF


def with_checksums(headers: PacketHeaders) -> PacketHeaders:
    """Return a copy with IPv4 and transport checksums recomputed."""
    ip = headers.ipv4
    if ip is None:
        return headers
    ip = evolve(ip, header_checksum=ipv4_checksum(ip))
    t = headers.transport
    if isinstance(t, TcpHeader):
        t = evolve(t, checksum=tcp_checksum(ip, t, headers.payload))
    elif isinstance(t, UdpHeader) and t.checksum != 0:
        t = evolve(t, checksum=udp_checksum(ip, t, headers.payload))
    return evolve(headers, ipv4=ip, transport=t)


# ---------------------------------------------------------------------------
# CRC-16/ARC


def _make_crc16_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ 0xA001 if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC16_TABLE = _make_crc16_table()


def crc16(data: bytes) -> int:
    """CRC-16/ARC: poly 0x8005 reflected (0xA001), init 0, no final xor."""
    crc = 0
    table = _CRC16_TABLE
    for b in data:
        crc = (crc >> 8) ^ table[(crc ^ b) & 0xFF]
    return crc


# ---------------------------------------------------------------------------
# parse / deparse


def parse_packet(data: bytes) -> PacketHeaders:
    data = bytes(data)
    if len(data) < ETH_HEADER_LEN:
        raise TruncatedPacket(f"ethernet header needs 14 bytes, got {len(data)}")
    dst, src, ethertype = _ETH.unpack_from(data, 0)
    eth = _new(EthernetHeader, dst_mac=dst, src_mac=src, ethertype=ethertype)
    if ethertype != ETHERTYPE_IPV4:
        return PacketHeaders(eth, payload=data[ETH_HEADER_LEN:])

    off = ETH_HEADER_LEN
    if len(data) < off + 20:
        raise TruncatedPacket("ipv4 header truncated")
    (ver_ihl, dscp_ecn, total_length, ident, flags_frag, ttl, proto, csum,
     s, d) = _IPV4.unpack_from(data, off)
    version, ihl = ver_ihl >> 4, ver_ihl & 0x0F
    if version != 4:
        raise MalformedHeader(f"ipv4 version field is {version}")
    if ihl < 5:
        raise MalformedHeader(f"ipv4 ihl {ihl} below minimum 5")
    hlen = ihl * 4
    if total_length < hlen:
        raise MalformedHeader(f"ipv4 total_length {total_length} < header length {hlen}")
    if len(data) < off + hlen:
        raise TruncatedPacket("ipv4 options truncated")
    if len(data) < off + total_length:
        raise TruncatedPacket(
            f"ipv4 total_length {total_length} exceeds {len(data) - off} available bytes"
        )
    ip = _new(
        Ipv4Header,
        src_addr=s,
        dst_addr=d,
        protocol=proto,
        total_length=total_length,
        ttl=ttl,
        identification=ident,
        flags_fragment=flags_frag,
        dscp_ecn=dscp_ecn,
        header_checksum=csum,
        version=version,
        ihl=ihl,
        options=data[off + 20: off + hlen],
    )
    end = off + total_length
    trailer = data[end:]
    off += hlen

    # non-first fragments carry no transport header
    if flags_frag & 0x1FFF:
        return PacketHeaders(eth, ip, None, data[off:end], trailer)

    transport: Optional[Transport] = None
    if proto == PROTO_TCP:
        if end - off < 20:
            raise TruncatedPacket("tcp header truncated")
        sport, dport, seq, ack, off_flags, window, tcsum, urg = _TCP.unpack_from(data, off)
        data_offset = off_flags >> 12
        if data_offset < 5:
            raise MalformedHeader(f"tcp data_offset {data_offset} below minimum 5")
        if end - off < data_offset * 4:
            raise TruncatedPacket("tcp options truncated")
        transport = _new(
            TcpHeader,
            src_port=sport,
            dst_port=dport,
            seq=seq,
            ack=ack,
            flags=off_flags & 0x0FFF,
            window=window,
            checksum=tcsum,
            urgent=urg,
            data_offset=data_offset,
            options=data[off + 20: off + data_offset * 4],
        )
        off += data_offset * 4
    elif proto == PROTO_UDP:
        if end - off < 8:
            raise TruncatedPacket("udp header truncated")
        sport, dport, length, ucsum = _UDP.unpack_from(data, off)
        if length < 8:
            raise MalformedHeader(f"udp length {length} below minimum 8")
        if off + length > end:
            raise TruncatedPacket(f"udp length {length} exceeds ipv4 payload")
        transport = _new(UdpHeader, src_port=sport, dst_port=dport, length=length, checksum=ucsum)
        off += 8
    return _new(PacketHeaders, ethernet=eth, ipv4=ip, transport=transport,
                payload=data[off:end], trailer=trailer)


def _check_consistency(h: PacketHeaders) -> None:
    ip, t = h.ipv4, h.transport
    if ip is None:
        if t is not None:
            raise InconsistentHeaders("transport header present without ipv4")
        if h.ethernet.ethertype == ETHERTYPE_IPV4:
            raise InconsistentHeaders("ethertype 0x0800 but ipv4 header absent")
        return
    if h.ethernet.ethertype != ETHERTYPE_IPV4:
        raise InconsistentHeaders("ipv4 header present but ethertype is not 0x0800")
    if ip.ihl * 4 != 20 + len(ip.options):
        raise InconsistentHeaders("ipv4 ihl does not match options length")
    if isinstance(t, TcpHeader):
        if ip.protocol != PROTO_TCP:
            raise InconsistentHeaders(f"tcp transport but ipv4.protocol={ip.protocol}")
        if t.data_offset * 4 != 20 + len(t.options):
            raise InconsistentHeaders("tcp data_offset does not match options length")
    elif isinstance(t, UdpHeader):
        if ip.protocol != PROTO_UDP:
            raise InconsistentHeaders(f"udp transport but ipv4.protocol={ip.protocol}")
    t_len = 0 if t is None else t.header_len
    if ip.total_length != ip.header_len + t_len + len(h.payload):
        raise InconsistentHeaders(
            f"ipv4 total_length {ip.total_length} != "
            f"{ip.header_len + t_len + len(h.payload)} serialized bytes"
        )


def deparse(headers: PacketHeaders) -> bytes:
    """Serialize a header stack byte-exactly; no field is recomputed."""
    _check_consistency(headers)
    parts = [headers.ethernet.pack()]
    if headers.ipv4 is not None:
        parts.append(headers.ipv4.pack())
        if headers.transport is not None:
            parts.append(headers.transport.pack())
    parts.append(headers.payload)
    parts.append(headers.trailer)
    return b"".join(parts)


def build_tcp_frame(
    src_addr: int,
    dst_addr: int,
    src_port: int,
    dst_port: int,
    payload: bytes = b"",
    *,
    flags: int = TCP_ACK,
    seq: int = 0,
    ack: int = 0,
    ttl: int = 64,
    src_mac: bytes = b"\x02\x00\x00\x00\x00\x01",
    dst_mac: bytes = b"\x02\x00\x00\x00\x00\x02",
) -> PacketHeaders:
    """Convenience constructor for a checksummed IPv4/TCP packet."""
    ip = Ipv4Header(
        src_addr=src_addr,
        dst_addr=dst_addr,
        protocol=PROTO_TCP,
        total_length=40 + len(payload),
        ttl=ttl,
    )
    tcp = TcpHeader(src_port, dst_port, seq=seq, ack=ack, flags=flags)
    return with_checksums(PacketHeaders(EthernetHeader(dst_mac, src_mac), ip, tcp, payload))


def encode_tcp_frame(
    src_addr: int,
    dst_addr: int,
    src_port: int,
    dst_port: int,
    payload: bytes = b"",
    *,
    flags: int = TCP_ACK,
    seq: int = 0,
    ack: int = 0,
    ttl: int = 64,
    src_mac: bytes = b"\x02\x00\x00\x00\x00\x01",
    dst_mac: bytes = b"\x02\x00\x00\x00\x00\x02",
) -> bytes:
    """Same bytes as ``deparse(build_tcp_frame(...))``, packed directly."""
    total = 40 + len(payload)
    ip = _IPV4.pack(0x45, 0, total, 0, 0, ttl, PROTO_TCP, 0, src_addr, dst_addr)
    ip_csum = ~ones_complement_sum(ip) & 0xFFFF
    tcp = _TCP.pack(src_port, dst_port, seq, ack, 0x5000 | (flags & 0x0FFF), 65535, 0, 0)
    pseudo = _PSEUDO.pack(src_addr, dst_addr, 0, PROTO_TCP, total - 20)
    tcp_csum = ~ones_complement_sum(pseudo + tcp + payload) & 0xFFFF
    return b"".join((
        _ETH.pack(dst_mac, src_mac, ETHERTYPE_IPV4),
        ip[:10], ip_csum.to_bytes(2, "big"), ip[12:],
        tcp[:16], tcp_csum.to_bytes(2, "big"), tcp[18:],
        payload,
    ))


def build_udp_frame(
    src_addr: int,
    dst_addr: int,
    src_port: int,
    dst_port: int,
    payload: bytes = b"",
    *,
    ttl: int = 64,
    src_mac: bytes = b"\x02\x00\x00\x00\x00\x01",
    dst_mac: bytes = b"\x02\x00\x00\x00\x00\x02",
) -> PacketHeaders:
    ip = Ipv4Header(
        src_addr=src_addr,
        dst_addr=dst_addr,
        protocol=PROTO_UDP,
        total_length=28 + len(payload),
        ttl=ttl,
    )
    udp = UdpHeader(src_port, dst_port, 8 + len(payload), checksum=1)
    return with_checksums(PacketHeaders(EthernetHeader(dst_mac, src_mac), ip, udp, payload))


# ---------------------------------------------------------------------------
# pcap

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1


def read_pcap(data: bytes) -> Iterator[bytes]:
    """Yield raw frames from a classic pcap capture with Ethernet linktype."""
    if len(data) < 24:
        raise TruncatedPacket("pcap global header truncated")
    magic = struct.unpack_from("<I", data, 0)[0]
    if magic == PCAP_MAGIC:
        endian = "<"
    elif magic == 0xD4C3B2A1:
        endian = ">"
    else:
        raise MalformedHeader(f"bad pcap magic 0x{magic:08x}")
    linktype = struct.unpack_from(endian + "I", data, 20)[0]
    if linktype != LINKTYPE_ETHERNET:
        raise MalformedHeader(f"unsupported pcap linktype {linktype}")
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            raise TruncatedPacket("pcap record header truncated")
        _, _, incl_len, _ = struct.unpack_from(endian + "IIII", data, off)
        off += 16
        if off + incl_len > len(data):
            raise TruncatedPacket("pcap record truncated")
        yield data[off: off + incl_len]
        off += incl_len


def write_pcap(frames: list[bytes]) -> bytes:
    out = [struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET)]
    for i, frame in enumerate(frames):
        out.append(struct.pack("<IIII", i, 0, len(frame), len(frame)))
        out.append(frame)
    return b"".join(out)
