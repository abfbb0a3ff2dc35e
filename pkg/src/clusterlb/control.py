"""Agent -> dataplane control message carrying the replica set.

Wire layout (big-endian)::

    0      2     3      4        6              10       12
    +------+-----+------+--------+--------------+--------+--------------------+
    | 5034 | 01  | cnt  | nodept | virtual_addr | v_port | cnt x 4-byte addrs |
    +------+-----+------+--------+--------------+--------+--------------------+

Replica addresses are kept in list order; a node listed twice receives twice
the share of new flows.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass

from .codec import PacketHeaders, UdpHeader

MAGIC = 0x5034
VERSION = 1
HEADER_LEN = 12
DEFAULT_MAX_REPLICAS = 10
DEFAULT_CONTROL_PORT = 7777

_FIXED = struct.Struct("!HBBHIH")


class ControlError(ValueError):
    """Base class for control message failures.

    ``field`` names the offending field and ``offset`` is the byte offset it
    occupies in the wire layout, when known.
    """

    def __init__(self, message: str, *, field: str | None = None, offset: int | None = None):
        super().__init__(message)
        self.field = field
        self.offset = offset


class BadMagic(ControlError):
    pass


class UnsupportedVersion(ControlError):
    pass


class TruncatedControl(ControlError):
    pass


class TooManyReplicas(ControlError):
    pass


class CountMismatch(ControlError):
    pass


class InvalidControl(ControlError):
    pass


@dataclass(frozen=True)
class ControlPayload:
    nodeport_port: int
    replica_addrs: tuple[int, ...]
    virtual_addr: int
    virtual_port: int
    replica_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "replica_addrs", tuple(int(a) for a in self.replica_addrs))
        if self.replica_count is None:
            object.__setattr__(self, "replica_count", len(self.replica_addrs))

    def validate(self, max_replicas: int = DEFAULT_MAX_REPLICAS) -> None:
        if self.replica_count != len(self.replica_addrs):
            raise CountMismatch(
                f"replica_count {self.replica_count} but {len(self.replica_addrs)} addresses",
                field="replica_count", offset=3,
            )
        if self.replica_count > max_replicas:
            raise TooManyReplicas(
                f"{self.replica_count} replicas exceeds maximum {max_replicas}",
                field="replica_count", offset=3,
            )
        if self.replica_count < 1:
            raise InvalidControl("at least one replica required", field="replica_count", offset=3)
        if not 0 < self.nodeport_port <= 0xFFFF:
            raise InvalidControl(f"bad nodeport_port {self.nodeport_port}",
                                 field="nodeport_port", offset=4)
        if not 0 < self.virtual_port <= 0xFFFF:
            raise InvalidControl(f"bad virtual_port {self.virtual_port}",
                                 field="virtual_port", offset=10)
        for i, addr in enumerate((self.virtual_addr, *self.replica_addrs)):
            if not 0 <= addr <= 0xFFFFFFFF:
                raise InvalidControl(f"address out of range: {addr}",
                                     field="replica_addrs" if i else "virtual_addr")

    def describe(self) -> list[tuple[str, str]]:
        """Field/value rows for human-readable output."""
        rows = [
            ("nodeport_port", str(self.nodeport_port)),
            ("replica_count", str(self.replica_count)),
            ("virtual_addr", str(ipaddress.IPv4Address(self.virtual_addr))),
            ("virtual_port", str(self.virtual_port)),
        ]
        for i, addr in enumerate(self.replica_addrs):
            rows.append((f"replica_addrs[{i}]", str(ipaddress.IPv4Address(addr))))
        return rows


def encode_control(payload: ControlPayload, max_replicas: int = DEFAULT_MAX_REPLICAS) -> bytes:
    payload.validate(max_replicas)
    head = _FIXED.pack(
        MAGIC,
        VERSION,
        payload.replica_count,
        payload.nodeport_port,
        payload.virtual_addr,
        payload.virtual_port,
    )
    return head + b"".join(a.to_bytes(4, "big") for a in payload.replica_addrs)


def decode_control(data: bytes, max_replicas: int = DEFAULT_MAX_REPLICAS) -> ControlPayload:
    data = bytes(data)
    if len(data) < 2:
        raise TruncatedControl("missing magic", field="magic", offset=0)
    if int.from_bytes(data[:2], "big") != MAGIC:
        raise BadMagic(f"magic 0x{data[:2].hex()} != 0x{MAGIC:04x}", field="magic", offset=0)
    if len(data) < 3:
        raise TruncatedControl("missing version", field="version", offset=2)
    if data[2] != VERSION:
        raise UnsupportedVersion(f"version {data[2]}", field="version", offset=2)
    if len(data) < HEADER_LEN:
        raise TruncatedControl(
            f"fixed header needs {HEADER_LEN} bytes, got {len(data)}",
            field="header", offset=len(data),
        )
    _, _, count, nodeport, vaddr, vport = _FIXED.unpack_from(data, 0)
    if count > max_replicas:
        raise TooManyReplicas(f"{count} replicas exceeds maximum {max_replicas}",
                              field="replica_count", offset=3)
    need = HEADER_LEN + 4 * count
    if len(data) < need:
        raise TruncatedControl(
            f"replica_count {count} needs {need} bytes, got {len(data)}",
            field="replica_addrs", offset=len(data),
        )
    if len(data) > need:
        raise CountMismatch(
            f"{len(data) - need} trailing bytes after {count} replica addresses",
            field="replica_addrs", offset=need,
        )
    addrs = struct.unpack_from("!%dI" % count, data, HEADER_LEN)
    payload = ControlPayload(nodeport, addrs, vaddr, vport, count)
    payload.validate(max_replicas)
    return payload


def is_control(headers: PacketHeaders, control_port: int = DEFAULT_CONTROL_PORT) -> bool:
    return isinstance(headers.transport, UdpHeader) and headers.transport.dst_port == control_port
