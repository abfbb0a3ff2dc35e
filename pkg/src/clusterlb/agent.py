"""Cluster-state agent: watch a state source, push control packets on change.

The state source is a YAML (or JSON) file::

    service_name: web
    virtual_addr: 192.0.2.10
    virtual_port: 80
    nodeport_port: 30080
    replicas:
      - {pod_id: web-1, node_addr: 10.0.1.1, phase: Running}

Anything with a ``snapshot()`` method returning :class:`ClusterState` can
stand in for the file (the simulator uses an in-memory source).
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import os
import socket
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Union

import yaml

from . import codec
from .control import (
    DEFAULT_CONTROL_PORT,
    DEFAULT_MAX_REPLICAS,
    ControlPayload,
    TooManyReplicas,
    encode_control,
)

log = logging.getLogger(__name__)


class AgentError(Exception):
    pass


class SourceUnavailable(AgentError):
    pass


class ParseError(AgentError):
    pass


class NoRunningReplicas(AgentError):
    pass


class Phase(enum.Enum):
    RUNNING = "Running"
    PENDING = "Pending"
    TERMINATING = "Terminating"


@dataclass(frozen=True)
class Replica:
    pod_id: str
    node_addr: int
    phase: Phase = Phase.RUNNING


@dataclass(frozen=True)
class ClusterState:
    service_name: str
    virtual_addr: int
    virtual_port: int
    nodeport_port: int
    replicas: tuple[Replica, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "replicas", tuple(self.replicas))
        seen = set()
        for r in self.replicas:
            if r.pod_id in seen:
                raise ParseError(f"duplicate pod_id {r.pod_id!r}")
            seen.add(r.pod_id)
            addr = ipaddress.IPv4Address(r.node_addr)
            if addr.is_multicast or addr.is_unspecified or int(addr) == 0xFFFFFFFF:
                raise ParseError(f"{addr} is not a unicast node address")

    @property
    def running(self) -> list[Replica]:
        return [r for r in self.replicas if r.phase is Phase.RUNNING]

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterState":
        try:
            replicas = tuple(
                Replica(
                    str(r["pod_id"]),
                    int(ipaddress.IPv4Address(r["node_addr"])),
                    Phase(r.get("phase", "Running")),
                )
                for r in doc.get("replicas") or ()
            )
            return cls(
                service_name=str(doc["service_name"]),
                virtual_addr=int(ipaddress.IPv4Address(doc["virtual_addr"])),
                virtual_port=int(doc["virtual_port"]),
                nodeport_port=int(doc["nodeport_port"]),
                replicas=replicas,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"invalid cluster state: {exc!r}") from None

    def to_dict(self) -> dict:
        return {
            "service_name": self.service_name,
            "virtual_addr": str(ipaddress.IPv4Address(self.virtual_addr)),
            "virtual_port": self.virtual_port,
            "nodeport_port": self.nodeport_port,
            "replicas": [
                {"pod_id": r.pod_id, "node_addr": str(ipaddress.IPv4Address(r.node_addr)),
                 "phase": r.phase.value}
                for r in self.replicas
            ],
        }


class StateSource(Protocol):
    def snapshot(self) -> ClusterState: ...


class FileStateSource:
    def __init__(self, path: Union[str, os.PathLike]):
        self.path = os.fspath(path)

    def snapshot(self) -> ClusterState:
        try:
            with open(self.path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise SourceUnavailable(f"{self.path}: {exc.strerror}") from None
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ParseError(f"{self.path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ParseError(f"{self.path}: expected a mapping at top level")
        return ClusterState.from_dict(doc)


class MemoryStateSource:
    def __init__(self, state: ClusterState):
        self.state = state

    def snapshot(self) -> ClusterState:
        return self.state


def snapshot(source: Union[StateSource, str, os.PathLike]) -> ClusterState:
    if isinstance(source, (str, os.PathLike)):
        source = FileStateSource(source)
    return source.snapshot()


class ChangeSet(enum.Enum):
    CHANGED = "changed"
    UNCHANGED = "unchanged"


def _effective(state: ClusterState):
    return (
        Counter(r.node_addr for r in state.running),
        state.nodeport_port,
        state.virtual_addr,
        state.virtual_port,
    )


def diff(prev: Optional[ClusterState], curr: ClusterState) -> ChangeSet:
    if prev is None or _effective(prev) != _effective(curr):
        return ChangeSet.CHANGED
    return ChangeSet.UNCHANGED


def build_payload(state: ClusterState, max_replicas: int = DEFAULT_MAX_REPLICAS) -> ControlPayload:
    addrs = sorted(r.node_addr for r in state.running)
    if not addrs:
        raise NoRunningReplicas(f"service {state.service_name!r} has no Running replicas")
    if len(addrs) > max_replicas:
        raise TooManyReplicas(f"{len(addrs)} Running replicas exceeds maximum {max_replicas}",
                              field="replica_count", offset=3)
    return ControlPayload(state.nodeport_port, tuple(addrs), state.virtual_addr, state.virtual_port)


# ---------------------------------------------------------------------------
# service loop


@dataclass
class AgentConfig:
    state_source: Union[str, os.PathLike, StateSource]
    poll_interval: float = 2.0
    control_port: int = DEFAULT_CONTROL_PORT
    dataplane_endpoint: tuple[str, int] = ("127.0.0.1", DEFAULT_CONTROL_PORT)
    max_replicas: int = DEFAULT_MAX_REPLICAS

    def __post_init__(self):
        if not self.poll_interval > 0:
            raise ValueError(f"poll_interval must be > 0, got {self.poll_interval}")
        if not isinstance(self.state_source, (str, os.PathLike)) and not hasattr(self.state_source, "snapshot"):
            raise TypeError("state_source must be a path or have a snapshot() method")


@dataclass
class SentControl:
    generation: int
    timestamp: float
    data: bytes


@dataclass
class ClusterAgent:
    """One agent instance; ``tick(now)`` performs a single poll cycle.

    ``send`` receives the encoded control message and may raise ``OSError``
    on transient failure, in which case the message is retried next cycle.
    """

    config: AgentConfig
    send: Callable[[bytes], None]
    last_sent: Optional[ClusterState] = None
    sent: list[SentControl] = field(default_factory=list)

    def tick(self, now: float) -> Optional[bytes]:
        try:
            state = snapshot(self.config.state_source)
        except (SourceUnavailable, ParseError) as exc:
            log.warning("state source error: %s (retrying next poll)", exc)
            return None
        if diff(self.last_sent, state) is ChangeSet.UNCHANGED:
            return None
        try:
            data = encode_control(build_payload(state, self.config.max_replicas),
                                  self.config.max_replicas)
        except (NoRunningReplicas, TooManyReplicas) as exc:
            log.error("not sending control packet: %s", exc)
            return None
        try:
            self.send(data)
        except OSError as exc:
            log.warning("control send failed: %s (retrying next poll)", exc)
            return None
        self.last_sent = state
        self.sent.append(SentControl(len(self.sent) + 1, now, data))
        log.info(
            "control_sent generation=%d ts=%.6f replicas=%d bytes=%s",
            len(self.sent), now, len(state.running), data.hex(),
        )
        return data


class UdpSender:
    def __init__(self, endpoint: tuple[str, int]):
        self.endpoint = endpoint
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def __call__(self, data: bytes) -> None:
        self.sock.sendto(data, self.endpoint)

    def close(self) -> None:
        self.sock.close()


def control_frame(data: bytes, src_addr: int, dst_addr: int,
                  control_port: int = DEFAULT_CONTROL_PORT, src_port: int = 40000) -> bytes:
    """Wrap an encoded control message in Ethernet/IPv4/UDP for injection."""
    return codec.deparse(codec.build_udp_frame(src_addr, dst_addr, src_port, control_port, data))


def run_agent(
    config: AgentConfig,
    send: Optional[Callable[[bytes], None]] = None,
    *,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
    max_polls: Optional[int] = None,
) -> ClusterAgent:
    """Run the poll loop; returns only when ``max_polls`` is exhausted."""
    owned = None
    if send is None:
        send = owned = UdpSender(config.dataplane_endpoint)
    agent = ClusterAgent(config, send)
    try:
        agent.tick(clock())
        polls = 0
        next_at = clock() + config.poll_interval
        while max_polls is None or polls < max_polls:
            delay = next_at - clock()
            if delay > 0:
                sleep(delay)
            agent.tick(clock())
            polls += 1
            next_at += config.poll_interval
    finally:
        if owned is not None:
            owned.close()
    return agent
