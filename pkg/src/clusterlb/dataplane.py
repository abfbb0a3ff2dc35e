"""Router pipeline: classify, load registers, ECMP-select, rewrite, route.

The per-packet entry point is :func:`process`; :class:`Router` bundles the
registry, the LPM table and the control port for callers that want a single
object.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from . import codec
from .codec import PacketHeaders, evolve
from .control import (
    DEFAULT_CONTROL_PORT,
    DEFAULT_MAX_REPLICAS,
    ControlError,
    ControlPayload,
    TooManyReplicas,
    decode_control,
    is_control,
)


class NoReplicas(LookupError):
    pass


class NoRoute(LookupError):
    pass


class InvalidPrefix(ValueError):
    pass


class RouteFileError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TrafficClass(enum.Enum):
    CONTROL = "control"
    INCOMING = "incoming"
    INTERNAL = "internal"
    OUTGOING = "outgoing"
    NON_IP = "non-ip"


class DropReason(enum.Enum):
    BAD_CHECKSUM = "bad-checksum"
    NON_IP = "non-ip"
    NO_ROUTE = "no-route"
    NO_REPLICAS = "no-replicas"
    TTL_EXPIRED = "ttl-expired"
    BAD_CONTROL = "bad-control"
    TOO_MANY_REPLICAS = "too-many-replicas"
    MALFORMED = "malformed"


# ---------------------------------------------------------------------------
# registers


@dataclass
class ReplicaRegistry:
    capacity: int = DEFAULT_MAX_REPLICAS
    nodeport_port: int = 0
    replica_count: int = 0
    replica_addrs: list[int] = field(default_factory=list)
    virtual_addr: int = 0
    virtual_port: int = 0
    known_workers: set[int] = field(default_factory=set)
    generation: int = 0

    def __post_init__(self):
        if len(self.replica_addrs) < self.capacity:
            self.replica_addrs = self.replica_addrs + [0] * (self.capacity - len(self.replica_addrs))

    @property
    def initialized(self) -> bool:
        return self.generation >= 1

    @property
    def active(self) -> list[int]:
        return self.replica_addrs[: self.replica_count]

    def apply(self, payload: ControlPayload) -> "ReplicaRegistry":
        if payload.replica_count > self.capacity or len(payload.replica_addrs) > self.capacity:
            raise TooManyReplicas(
                f"{payload.replica_count} replicas exceeds register capacity {self.capacity}"
            )
        slots = list(payload.replica_addrs) + [0] * (self.capacity - len(payload.replica_addrs))
        # build everything first, then swap in one step so readers never see a mix
        new_state = dict(
            nodeport_port=payload.nodeport_port,
            replica_count=payload.replica_count,
            replica_addrs=slots,
            virtual_addr=payload.virtual_addr,
            virtual_port=payload.virtual_port,
            known_workers=self.known_workers | set(payload.replica_addrs),
            generation=self.generation + 1,
        )
        self.__dict__.update(new_state)
        return self

    def dump(self) -> str:
        """Structured text snapshot of the registers."""
        def fmt(a: int) -> str:
            return str(ipaddress.IPv4Address(a))

        lines = [
            f"generation: {self.generation}",
            f"capacity: {self.capacity}",
            f"nodeport_port: {self.nodeport_port}",
            f"virtual_addr: {fmt(self.virtual_addr)}",
            f"virtual_port: {self.virtual_port}",
            f"replica_count: {self.replica_count}",
            "replica_addrs:",
        ]
        lines += [f"  - {fmt(a)}" for a in self.active]
        lines.append("known_workers:")
        lines += [f"  - {fmt(a)}" for a in sorted(self.known_workers)]
        return "\n".join(lines) + "\n"


def apply_control(registry: ReplicaRegistry, payload: ControlPayload) -> ReplicaRegistry:
    return registry.apply(payload)


# ---------------------------------------------------------------------------
# ECMP


_FLOW = struct.Struct("!IIBHH")


@dataclass(frozen=True)
class FlowKey:
    src_addr: int
    dst_addr: int
    protocol: int
    src_port: int
    dst_port: int

    def pack(self) -> bytes:
        return _FLOW.pack(self.src_addr, self.dst_addr, self.protocol, self.src_port, self.dst_port)

    @classmethod
    def from_headers(cls, headers: PacketHeaders) -> "FlowKey":
        ip, t = headers.ipv4, headers.transport
        return cls(ip.src_addr, ip.dst_addr, ip.protocol, t.src_port, t.dst_port)


def ecmp_select(key: FlowKey, registry: ReplicaRegistry) -> tuple[int, int]:
    if registry.replica_count == 0:
        raise NoReplicas("registry holds no replicas")
    index = codec.crc16(key.pack()) % registry.replica_count
    return index, registry.replica_addrs[index]


# ---------------------------------------------------------------------------
# classification and rewrites


def classify(
    headers: PacketHeaders,
    registry: ReplicaRegistry,
    control_port: int = DEFAULT_CONTROL_PORT,
) -> TrafficClass:
    if headers.ipv4 is None:
        return TrafficClass.NON_IP
    if is_control(headers, control_port):
        return TrafficClass.CONTROL
    tcp = headers.tcp
    if tcp is not None and registry.initialized:
        ip = headers.ipv4
        if ip.dst_addr == registry.virtual_addr and tcp.dst_port == registry.virtual_port:
            return TrafficClass.INCOMING
        if ip.src_addr in registry.known_workers and tcp.src_port == registry.nodeport_port:
            return TrafficClass.OUTGOING
    return TrafficClass.INTERNAL


def rewrite_incoming(headers: PacketHeaders, node_addr: int, registry: ReplicaRegistry) -> PacketHeaders:
    ip = evolve(headers.ipv4, dst_addr=node_addr)
    tcp = evolve(headers.tcp, dst_port=registry.nodeport_port)
    return codec.with_checksums(evolve(headers, ipv4=ip, transport=tcp))


def rewrite_outgoing(headers: PacketHeaders, registry: ReplicaRegistry) -> PacketHeaders:
    ip = evolve(headers.ipv4, src_addr=registry.virtual_addr)
    tcp = evolve(headers.tcp, src_port=registry.virtual_port)
    return codec.with_checksums(evolve(headers, ipv4=ip, transport=tcp))


# ---------------------------------------------------------------------------
# LPM


@dataclass(frozen=True)
class Route:
    prefix: int
    prefix_len: int
    next_hop: int
    egress_port: int

    def __str__(self) -> str:
        return (f"{ipaddress.IPv4Address(self.prefix)}/{self.prefix_len} "
                f"{ipaddress.IPv4Address(self.next_hop)} {self.egress_port}")


def _mask(prefix_len: int) -> int:
    return (0xFFFFFFFF << (32 - prefix_len)) & 0xFFFFFFFF


class LpmTable:
    """Longest-prefix-match table, one exact-match dict per prefix length."""

    def __init__(self, routes=()):
        self._by_len: dict[int, dict[int, Route]] = {}
        for r in routes:
            self.insert(r.prefix, r.prefix_len, r.next_hop, r.egress_port)

    def insert(self, prefix: int, prefix_len: int, next_hop: int, egress_port: int) -> "LpmTable":
        if not 0 <= prefix_len <= 32:
            raise InvalidPrefix(f"prefix length {prefix_len} outside 0..32")
        if not 0 <= prefix <= 0xFFFFFFFF:
            raise InvalidPrefix(f"prefix {prefix} is not a 32-bit address")
        if prefix & ~_mask(prefix_len) & 0xFFFFFFFF:
            raise InvalidPrefix(
                f"{ipaddress.IPv4Address(prefix)}/{prefix_len} has host bits set"
            )
        self._by_len.setdefault(prefix_len, {})[prefix] = Route(prefix, prefix_len, next_hop, egress_port)
        return self

    def lookup(self, dst: int) -> Route:
        for plen in sorted(self._by_len, reverse=True):
            route = self._by_len[plen].get(dst & _mask(plen))
            if route is not None:
                return route
        raise NoRoute(f"no route to {ipaddress.IPv4Address(dst)}")

    @property
    def entries(self) -> list[Route]:
        return [r for plen in sorted(self._by_len, reverse=True)
                for _, r in sorted(self._by_len[plen].items())]

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_len.values())

    def dumps(self) -> str:
        return "".join(f"{r}\n" for r in self.entries)

    @classmethod
    def loads(cls, text: str) -> "LpmTable":
        """Parse ``prefix/len next_hop egress_port`` lines; ``#`` starts a comment."""
        table = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise RouteFileError(f"expected 3 fields, got {len(parts)}", lineno)
            try:
                net, plen = parts[0].split("/")
                prefix = int(ipaddress.IPv4Address(net))
                next_hop = int(ipaddress.IPv4Address(parts[1]))
                table.insert(prefix, int(plen), next_hop, int(parts[2]))
            except (ValueError, InvalidPrefix) as exc:
                raise RouteFileError(str(exc), lineno) from None
        return table


def lpm_insert(table: LpmTable, prefix: int, prefix_len: int, next_hop: int, egress_port: int) -> LpmTable:
    return table.insert(prefix, prefix_len, next_hop, egress_port)


def lpm_lookup(table: LpmTable, dst: int) -> tuple[int, int]:
    route = table.lookup(dst)
    return route.next_hop, route.egress_port


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class Forward:
    egress_port: int
    next_hop: int
    headers: PacketHeaders
    traffic_class: TrafficClass
    selected: Optional[int] = None  # replica chosen for Incoming traffic


@dataclass(frozen=True)
class Drop:
    reason: DropReason
    traffic_class: Optional[TrafficClass] = None
    detail: str = ""


@dataclass(frozen=True)
class ConsumedControl:
    generation: int


ForwardingDecision = Union[Forward, Drop, ConsumedControl]


def _route(headers: PacketHeaders, table: LpmTable, cls: TrafficClass,
           selected: Optional[int] = None) -> ForwardingDecision:
    ip = headers.ipv4
    if ip.ttl <= 1:
        return Drop(DropReason.TTL_EXPIRED, cls)
    try:
        route = table.lookup(ip.dst_addr)
    except NoRoute as exc:
        return Drop(DropReason.NO_ROUTE, cls, str(exc))
    # ttl shares a 16-bit word with protocol; the checksum verified on ingress
    # (or was just recomputed by a rewrite), so an incremental update is exact
    word = (ip.ttl << 8) | ip.protocol
    csum = codec.checksum_adjust(ip.header_checksum, word, word - 0x100)
    ip = evolve(ip, ttl=ip.ttl - 1, header_checksum=csum)
    return Forward(route.egress_port, route.next_hop, evolve(headers, ipv4=ip), cls, selected)


def process(
    headers: PacketHeaders,
    registry: ReplicaRegistry,
    table: LpmTable,
    control_port: int = DEFAULT_CONTROL_PORT,
    max_replicas: Optional[int] = None,
    *,
    verify: bool = True,
) -> ForwardingDecision:
    """Run one packet through checksum verification, ingress and routing.

    ``verify=False`` skips the checksum stage for callers that already
    checked the raw frame.
    """
    if headers.ipv4 is None:
        return Drop(DropReason.NON_IP, TrafficClass.NON_IP)
    if verify and not codec.verify_checksums(headers):
        return Drop(DropReason.BAD_CHECKSUM)

    cls = classify(headers, registry, control_port)
    if cls is TrafficClass.CONTROL:
        limit = registry.capacity if max_replicas is None else max_replicas
        try:
            payload = decode_control(headers.payload, max_replicas=limit)
            registry.apply(payload)
        except TooManyReplicas as exc:
            return Drop(DropReason.TOO_MANY_REPLICAS, cls, str(exc))
        except ControlError as exc:
            return Drop(DropReason.BAD_CONTROL, cls, str(exc))
        return ConsumedControl(registry.generation)

    if cls is TrafficClass.INCOMING:
        try:
            _, node = ecmp_select(FlowKey.from_headers(headers), registry)
        except NoReplicas as exc:
            return Drop(DropReason.NO_REPLICAS, cls, str(exc))
        return _route(rewrite_incoming(headers, node, registry), table, cls, node)
    if cls is TrafficClass.OUTGOING:
        return _route(rewrite_outgoing(headers, registry), table, cls)
    return _route(headers, table, cls)


class Router:
    """Registry + routing table + config, driven one frame at a time."""

    def __init__(self, table: Optional[LpmTable] = None, *,
                 control_port: int = DEFAULT_CONTROL_PORT,
                 max_replicas: int = DEFAULT_MAX_REPLICAS):
        self.table = table if table is not None else LpmTable()
        self.registry = ReplicaRegistry(capacity=max_replicas)
        self.control_port = control_port

    def process(self, headers: PacketHeaders, *, verify: bool = True) -> ForwardingDecision:
        return process(headers, self.registry, self.table, self.control_port, verify=verify)

    def process_frame(self, frame: bytes) -> tuple[ForwardingDecision, Optional[bytes]]:
        """Parse, process and deparse; returns the decision and output bytes."""
        try:
            headers = codec.parse_packet(frame)
        except codec.CodecError as exc:
            return Drop(DropReason.MALFORMED, None, str(exc)), None
        if headers.ipv4 is not None and not codec.verify_frame(frame):
            return Drop(DropReason.BAD_CHECKSUM), None
        decision = self.process(headers, verify=False)
        if isinstance(decision, Forward):
            return decision, codec.deparse(decision.headers)
        return decision, None
