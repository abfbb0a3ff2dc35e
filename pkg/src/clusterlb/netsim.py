"""Discrete-event simulation of clients, router, cluster nodes and baselines.

Every packet is a real Ethernet/IPv4/TCP frame. The router node runs the
dataplane pipeline on it; the control-plane node and the external load
balancer are modelled as NAT boxes with connection tables (the two baselines).

Timing model: each link traversal costs the link latency; each forwarding
node (router, control-plane node, external LB) adds its processing delay per
packet; a worker adds ``server_time`` before answering a request; the external
LB adds ``lb_setup_latency`` to the first packet of every connection. Nodes
are infinite servers (no queueing), so only the path and mode decide timing.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import ipaddress
import itertools
import math
import random
from collections import Counter, deque
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Optional

import numpy as np
import yaml

from . import codec
from .agent import ClusterAgent, AgentConfig, ClusterState, MemoryStateSource, Phase, Replica, control_frame
from .codec import TCP_ACK, TCP_PSH, TCP_SYN, PacketHeaders, evolve
from .control import DEFAULT_CONTROL_PORT, DEFAULT_MAX_REPLICAS
from .dataplane import ConsumedControl, Forward, LpmTable, Router, TrafficClass

EPHEMERAL_PORTS = (32768, 60999)
REQUEST_BYTES = b"GET / HTTP/1.1\r\nHost: svc\r\n\r\n"
RESPONSE_BYTES = b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n"


class SimError(ValueError):
    pass


class DuplicateAddress(SimError):
    pass


class DisconnectedRouter(SimError):
    pass


class UnsupportedFormat(SimError):
    pass


class Role(enum.Enum):
    CLIENT = "client"
    ROUTER = "router"
    CONTROL_PLANE = "control-plane"
    WORKER = "worker"
    EXTERNAL_LB = "external-lb"


class Mode(enum.Enum):
    IN_NETWORK = "in-network"
    NODEPORT = "nodeport"
    EXTERNAL_LB = "external-lb"


def _ip(value) -> int:
    return int(ipaddress.IPv4Address(value))


def _fmt_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    role: Role
    addr: int


@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    latency: float = 0.0005
    a_port: Optional[int] = None
    b_port: Optional[int] = None


@dataclass
class Topology:
    nodes: list[NodeSpec]
    links: list[LinkSpec]

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        nodes = [NodeSpec(str(n["id"]), Role(n["role"]), _ip(n["addr"])) for n in doc["nodes"]]
        links = [
            LinkSpec(str(l["a"]), str(l["b"]), float(l.get("latency", 0.0005)),
                     l.get("a_port"), l.get("b_port"))
            for l in doc.get("links", ())
        ]
        return cls(nodes, links)

    @classmethod
    def load(cls, path) -> "Topology":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.node_id, "role": n.role.value, "addr": _fmt_ip(n.addr)} for n in self.nodes],
            "links": [{k: v for k, v in asdict(l).items() if v is not None} for l in self.links],
        }

    def by_role(self, role: Role) -> list[NodeSpec]:
        return [n for n in self.nodes if n.role is role]


def default_topology(workers: int = 10, latency: float = 0.0005) -> Topology:
    """Router in the middle; two test machines, the control-plane node and the
    workers hang off it. The control-plane node also has a direct cluster
    link to every worker, and test machine 1 (the external LB) sits on a
    direct link to test machine 2 (the client)."""
    nodes = [
        NodeSpec("tm2", Role.CLIENT, _ip("203.0.113.2")),
        NodeSpec("tm1", Role.EXTERNAL_LB, _ip("203.0.113.1")),
        NodeSpec("router", Role.ROUTER, _ip("10.0.0.1")),
        NodeSpec("cp", Role.CONTROL_PLANE, _ip("10.0.0.2")),
    ]
    nodes += [NodeSpec(f"w{i:02d}", Role.WORKER, _ip(f"10.0.1.{i}")) for i in range(1, workers + 1)]
    links = [
        LinkSpec("tm2", "router", latency),
        LinkSpec("tm1", "router", latency),
        LinkSpec("tm2", "tm1", latency),
        LinkSpec("cp", "router", latency),
    ]
    links += [LinkSpec(f"w{i:02d}", "router", latency) for i in range(1, workers + 1)]
    links += [LinkSpec("cp", f"w{i:02d}", latency) for i in range(1, workers + 1)]
    return Topology(nodes, links)


# ---------------------------------------------------------------------------
# scenario / report


@dataclass
class Scenario:
    mode: Mode = Mode.IN_NETWORK
    concurrency: int = 500
    total_requests: int = 500
    requests_per_session: int = 1
    hop_latency: Optional[float] = None  # overrides every link latency when set
    router_delay: float = 0.005
    cp_delay: Optional[float] = None  # defaults to router_delay
    lb_delay: float = 0.0
    lb_setup_latency: float = 0.65
    server_time: float = 0.028
    seed: int = 0
    start_time: float = 0.05
    session_interval: Optional[float] = None  # open-loop arrivals when set
    virtual_addr: str = "192.0.2.10"
    virtual_port: int = 80
    nodeport_port: int = 30080
    control_port: int = DEFAULT_CONTROL_PORT
    max_replicas: int = DEFAULT_MAX_REPLICAS
    poll_interval: float = 2.0
    replicas: Optional[list[str]] = None  # worker ids, repeats allowed

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.concurrency < 1:
            raise SimError("concurrency must be >= 1")
        if self.requests_per_session < 1:
            raise SimError("requests_per_session must be >= 1")
        if 0 < self.total_requests < self.concurrency:
            raise SimError("total_requests must be >= concurrency")

    @property
    def effective_cp_delay(self) -> float:
        return self.router_delay if self.cp_delay is None else self.cp_delay

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SimError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class SimReport:
    mode: str
    per_node_request_counts: dict[str, int] = field(default_factory=dict)
    request_times: list[float] = field(default_factory=list, repr=False)
    sessions: int = 0
    completed_requests: int = 0
    dropped_requests: int = 0
    affinity_violations: Optional[int] = None
    registry_generation: Optional[int] = None
    registry_update_latency: Optional[float] = None
    removed_node_selections: Optional[int] = None
    post_update_counts: Optional[dict[str, int]] = None
    invariant_failures: list[str] = field(default_factory=list)
    expected_weights: Optional[dict[str, int]] = None  # replica multiplicity per node

    @property
    def mean_request_time(self) -> Optional[float]:
        return float(np.mean(self.request_times)) if self.request_times else None

    @property
    def p50(self) -> Optional[float]:
        return float(np.percentile(self.request_times, 50)) if self.request_times else None

    @property
    def p95(self) -> Optional[float]:
        return float(np.percentile(self.request_times, 95)) if self.request_times else None

    @property
    def ok(self) -> bool:
        return not self.invariant_failures

    def chi_square(self, weights: Optional[dict[str, int]] = None) -> Optional[float]:
        """Pearson statistic of the per-node counts against ``weights``.

        Defaults to the replica multiplicities of the run, else uniform. A node
        with zero weight that still received requests gives ``inf``.
        """
        counts = self.per_node_request_counts
        weights = weights or self.expected_weights or {k: 1 for k in counts}
        total = sum(counts.values())
        wsum = sum(weights.values())
        if not total or not wsum:
            return None
        stat = 0.0
        for node in set(weights) | set(counts):
            expected = total * weights.get(node, 0) / wsum
            if expected == 0:
                if counts.get(node, 0):
                    return math.inf
                continue
            stat += (counts.get(node, 0) - expected) ** 2 / expected
        return stat

    def metrics(self) -> list[tuple[str, Any]]:
        return [
            ("mode", self.mode),
            ("sessions", self.sessions),
            ("completed_requests", self.completed_requests),
            ("dropped_requests", self.dropped_requests),
            ("mean_request_time", self.mean_request_time),
            ("p50_request_time", self.p50),
            ("p95_request_time", self.p95),
            ("affinity_violations", self.affinity_violations),
            ("registry_generation", self.registry_generation),
            ("registry_update_latency", self.registry_update_latency),
            ("removed_node_selections", self.removed_node_selections),
            ("chi_square", self.chi_square()),
            ("invariant_failures", len(self.invariant_failures)),
        ]


def _fmt_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def export_report(report: SimReport, format: str = "csv") -> bytes:
    """Render a report. ``csv``: node_id,requests; ``metrics``: metric,value;
    ``text``: both as structured text."""
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node_id", "requests"])
        for node, count in sorted(report.per_node_request_counts.items()):
            w.writerow([node, count])
        return buf.getvalue().encode()
    if format == "metrics":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.metrics():
            w.writerow([name, _fmt_value(value)])
        return buf.getvalue().encode()
    if format == "text":
        lines = ["metrics:"]
        lines += [f"  {name}: {_fmt_value(value)}" for name, value in report.metrics()]
        lines.append("per_node_request_counts:")
        lines += [f"  {n}: {c}" for n, c in sorted(report.per_node_request_counts.items())]
        if report.post_update_counts is not None:
            lines.append("post_update_counts:")
            lines += [f"  {n}: {c}" for n, c in sorted(report.post_update_counts.items())]
        lines.append("invariant_failures:")
        lines += [f"  - {f}" for f in report.invariant_failures]
        return ("\n".join(lines) + "\n").encode()
    raise UnsupportedFormat(f"unsupported report format {format!r}")


# ---------------------------------------------------------------------------
# simulation


class Simulation:
    """A validated topology with precomputed ports and shortest-path routes."""

    def __init__(self, topology: Topology):
        self.topology = topology
        self.nodes = {n.node_id: n for n in topology.nodes}
        if len(self.nodes) != len(topology.nodes):
            raise SimError("duplicate node ids")
        seen: dict[int, str] = {}
        for n in topology.nodes:
            if n.addr in seen:
                raise DuplicateAddress(f"{_fmt_ip(n.addr)} used by {seen[n.addr]} and {n.node_id}")
            seen[n.addr] = n.node_id
        routers = topology.by_role(Role.ROUTER)
        if len(routers) != 1:
            raise DisconnectedRouter(f"expected exactly one router, found {len(routers)}")
        self.router_id = routers[0].node_id

        # ports[node] = {port: (peer, peer_port, latency)}
        self.ports: dict[str, dict[int, tuple[str, int, float]]] = {n: {} for n in self.nodes}
        for link in topology.links:
            for end in (link.a, link.b):
                if end not in self.nodes:
                    raise SimError(f"link references unknown node {end!r}")
            pa = link.a_port if link.a_port is not None else len(self.ports[link.a]) + 1
            pb = link.b_port if link.b_port is not None else len(self.ports[link.b]) + 1
            if pa in self.ports[link.a] or pb in self.ports[link.b]:
                raise SimError(f"port reused on link {link.a}-{link.b}")
            self.ports[link.a][pa] = (link.b, pb, link.latency)
            self.ports[link.b][pb] = (link.a, pa, link.latency)

        self.first_hop = {n: self._bfs(n) for n in self.nodes}
        unreachable = [n for n in self.nodes if n != self.router_id and self.router_id not in self.first_hop[n]]
        if unreachable:
            raise DisconnectedRouter(f"no path to the router from {', '.join(sorted(unreachable))}")

    def _bfs(self, src: str) -> dict[str, int]:
        """First-hop egress port from ``src`` toward every reachable node."""
        first: dict[str, int] = {}
        queue = deque()
        for port, (peer, _, _) in sorted(self.ports[src].items()):
            if peer not in first and peer != src:
                first[peer] = port
                queue.append(peer)
        while queue:
            cur = queue.popleft()
            for _, (peer, _, _) in sorted(self.ports[cur].items()):
                if peer != src and peer not in first:
                    first[peer] = first[cur]
                    queue.append(peer)
        return first

    def router_table(self) -> LpmTable:
        table = LpmTable()
        for node_id, port in self.first_hop[self.router_id].items():
            next_hop = self.ports[self.router_id][port][0]
            table.insert(self.nodes[node_id].addr, 32, self.nodes[next_hop].addr, port)
        return table

    def addr_of(self, node_id: str) -> int:
        return self.nodes[node_id].addr

    def default_state(self, scenario: Scenario) -> ClusterState:
        workers = [n.node_id for n in self.topology.by_role(Role.WORKER)]
        chosen = scenario.replicas if scenario.replicas is not None else workers
        for w in chosen:
            if w not in self.nodes or self.nodes[w].role is not Role.WORKER:
                raise SimError(f"replica placed on unknown worker {w!r}")
        replicas = [Replica(f"pod-{i}", self.addr_of(w), Phase.RUNNING) for i, w in enumerate(chosen)]
        return ClusterState("svc", _ip(scenario.virtual_addr), scenario.virtual_port,
                            scenario.nodeport_port, tuple(replicas))


def build_topology(spec: Topology) -> Simulation:
    return Simulation(spec)


class _EventLoop:
    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()

    def at(self, t: float, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (t, next(self._seq), fn, args))

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def run(self, until: Optional[float] = None) -> None:
        while self._queue:
            t, _, fn, args = self._queue[0]
            if until is not None and t > until:
                break
            heapq.heappop(self._queue)
            self.now = t
            fn(*args)


@dataclass
class _Session:
    sid: int
    src_port: int
    n_requests: int
    started: float
    sent_at: float = 0.0
    done: int = 0
    workers: set = field(default_factory=set)


class _Run:
    """State of one scenario execution over a :class:`Simulation`."""

    def __init__(self, sim: Simulation, scenario: Scenario, state: ClusterState):
        self.sim = sim
        self.sc = scenario
        self.loop = _EventLoop()
        self.rng = random.Random(scenario.seed)
        self.state_source = MemoryStateSource(state)
        self.report = SimReport(mode=scenario.mode.value)

        self.router = Router(sim.router_table(), control_port=scenario.control_port,
                             max_replicas=scenario.max_replicas)
        self.addr_to_node = {n.addr: n.node_id for n in sim.topology.nodes}
        self.workers = [n.node_id for n in sim.topology.by_role(Role.WORKER)]
        self.served: Counter = Counter()
        self.selections: list[tuple[float, int]] = []  # (time, selected addr)
        self.generation_times: list[tuple[float, int]] = []
        self.drops: Counter = Counter()

        clients = sim.topology.by_role(Role.CLIENT)
        if not clients:
            raise SimError("topology has no client node")
        self.client = clients[0].node_id
        self.client_addr = clients[0].addr
        self.sessions: dict[int, _Session] = {}  # keyed by client source port
        self.all_sessions: list[_Session] = []
        self.plan: deque[int] = deque()
        self.planned_requests = 0

        cps = sim.topology.by_role(Role.CONTROL_PLANE)
        self.cp = cps[0].node_id if cps else None
        lbs = sim.topology.by_role(Role.EXTERNAL_LB)
        self.lb = lbs[0].node_id if lbs else None
        self.nat: dict[str, dict] = {"cp": {}, "lb": {}}
        self.nat_rev: dict[str, dict] = {"cp": {}, "lb": {}}
        self.rr: dict[str, int] = {"cp": 0, "lb": 0}
        self.nat_ports = {"cp": itertools.count(20000), "lb": itertools.count(20000)}

        mode = scenario.mode
        if mode is Mode.IN_NETWORK:
            self.target = (_ip(scenario.virtual_addr), scenario.virtual_port)
        elif mode is Mode.NODEPORT:
            if self.cp is None:
                raise SimError("NodePort baseline needs a control-plane node")
            self.target = (sim.addr_of(self.cp), scenario.nodeport_port)
        else:
            if self.lb is None:
                raise SimError("external LB baseline needs an external-lb node")
            self.target = (sim.addr_of(self.lb), scenario.virtual_port)

        self.agent: Optional[ClusterAgent] = None
        if mode is Mode.IN_NETWORK:
            if self.cp is None:
                raise SimError("in-network mode needs a control-plane node to host the agent")
            cfg = AgentConfig(self.state_source, poll_interval=scenario.poll_interval,
                              control_port=scenario.control_port, max_replicas=scenario.max_replicas)
            self.agent = ClusterAgent(cfg, self._agent_send)

    # -- link layer --------------------------------------------------------

    def _latency(self, latency: float) -> float:
        return self.sc.hop_latency if self.sc.hop_latency is not None else latency

    def transmit(self, node: str, port: int, frame: bytes) -> None:
        peer, peer_port, latency = self.sim.ports[node][port]
        self.loop.after(self._latency(latency), self.receive, peer, peer_port, frame)

    def send_from(self, node: str, frame: bytes, dst: int) -> None:
        """Host-side routing: shortest path to the owner of ``dst``, else toward the router."""
        owner = self.addr_to_node.get(dst, self.sim.router_id)
        port = self.sim.first_hop[node].get(owner)
        if port is None:
            self.drops["host-no-route"] += 1
            return
        self.transmit(node, port, frame)

    def receive(self, node: str, port: int, frame: bytes) -> None:
        role = self.sim.nodes[node].role
        if role is Role.ROUTER:
            self.loop.after(self.sc.router_delay, self._router, node, frame)
        elif role is Role.WORKER:
            self._worker(node, frame)
        elif role is Role.CLIENT:
            self._client(frame)
        elif role is Role.CONTROL_PLANE:
            self.loop.after(self.sc.effective_cp_delay, self._nat_box, "cp", node, frame)
        elif role is Role.EXTERNAL_LB:
            self.loop.after(self.sc.lb_delay, self._nat_box, "lb", node, frame)

    # -- router ------------------------------------------------------------

    def _router(self, node: str, frame: bytes) -> None:
        decision, out = self.router.process_frame(frame)
        if isinstance(decision, Forward):
            if not codec.verify_frame(out):
                self.report.invariant_failures.append(
                    f"t={self.loop.now:.6f}: forwarded packet with invalid checksum")
            if decision.traffic_class is TrafficClass.INCOMING:
                self.selections.append((self.loop.now, decision.selected))
            self.transmit(node, decision.egress_port, out)
        elif isinstance(decision, ConsumedControl):
            self.generation_times.append((self.loop.now, decision.generation))
        else:
            self.drops[decision.reason.value] += 1

    # -- agent -------------------------------------------------------------

    def _agent_send(self, data: bytes) -> None:
        frame = control_frame(data, self.sim.addr_of(self.cp), self.sim.addr_of(self.sim.router_id),
                              self.sc.control_port)
        self.send_from(self.cp, frame, self.sim.addr_of(self.sim.router_id))

    def _agent_poll(self) -> None:
        self.agent.tick(self.loop.now)
        self.loop.after(self.sc.poll_interval, self._agent_poll)

    # -- workers -----------------------------------------------------------

    def _worker(self, node: str, frame: bytes) -> None:
        h = codec.parse_packet(frame)
        tcp = h.tcp
        if tcp is None or h.ipv4.dst_addr != self.sim.addr_of(node) or tcp.dst_port != self.sc.nodeport_port:
            self.drops["worker-unexpected"] += 1
            return
        if not codec.verify_frame(frame):
            self.drops["worker-bad-checksum"] += 1
            return
        if self.sc.mode is Mode.IN_NETWORK:
            sess = self.sessions.get(tcp.src_port) if h.ipv4.src_addr == self.client_addr else None
            if sess is not None:
                sess.workers.add(node)
        if tcp.flags & TCP_SYN:
            self._reply(node, h, b"", TCP_SYN | TCP_ACK)
        elif h.payload:
            self.served[node] += 1
            self.loop.after(self.sc.server_time, self._reply, node, h, RESPONSE_BYTES, TCP_PSH | TCP_ACK)

    def _reply(self, node: str, h: PacketHeaders, payload: bytes, flags: int) -> None:
        ip, tcp = h.ipv4, h.tcp
        out = codec.encode_tcp_frame(ip.dst_addr, ip.src_addr, tcp.dst_port, tcp.src_port, payload,
                                     flags=flags, seq=tcp.ack,
                                     ack=(tcp.seq + max(1, len(h.payload))) & 0xFFFFFFFF)
        self.send_from(node, out, ip.src_addr)

    # -- NAT boxes (NodePort via the control-plane node, external LB) ------

    def _nat_box(self, kind: str, node: str, frame: bytes) -> None:
        h = codec.parse_packet(frame)
        ip, tcp = h.ipv4, h.tcp
        me = self.sim.addr_of(node)
        if self.sc.mode is Mode.IN_NETWORK or tcp is None or ip.dst_addr != me:
            self.drops[f"{kind}-unexpected"] += 1
            return
        listen_port = self.sc.nodeport_port if kind == "cp" else self.sc.virtual_port
        if tcp.dst_port == listen_port:
            key = (ip.src_addr, tcp.src_port)
            entry = self.nat[kind].get(key)
            extra = 0.0
            if entry is None:
                running = sorted(r.node_addr for r in self.state_source.snapshot().running)
                if not running:
                    self.drops[f"{kind}-no-backend"] += 1
                    return
                backend = running[self.rr[kind] % len(running)]
                self.rr[kind] += 1
                entry = (backend, next(self.nat_ports[kind]))
                self.nat[kind][key] = entry
                self.nat_rev[kind][entry[1]] = key
                if kind == "lb":
                    extra = self.sc.lb_setup_latency
            backend, nat_port = entry
            out = evolve(h, ipv4=evolve(ip, src_addr=me, dst_addr=backend),
                         transport=evolve(tcp, src_port=nat_port, dst_port=self.sc.nodeport_port))
            self.loop.after(extra, self.send_from, node, codec.deparse(codec.with_checksums(out)), backend)
        elif tcp.dst_port in self.nat_rev[kind]:
            client_addr, client_port = self.nat_rev[kind][tcp.dst_port]
            out = evolve(h, ipv4=evolve(ip, src_addr=me, dst_addr=client_addr),
                         transport=evolve(tcp, src_port=listen_port, dst_port=client_port))
            self.send_from(node, codec.deparse(codec.with_checksums(out)), client_addr)
        else:
            self.drops[f"{kind}-unexpected"] += 1

    # -- client ------------------------------------------------------------

    def _pick_port(self) -> int:
        lo, hi = EPHEMERAL_PORTS
        while True:
            port = self.rng.randint(lo, hi)
            if port not in self.sessions:
                return port

    def _start_session(self) -> None:
        if not self.plan:
            return
        n = self.plan.popleft()
        sess = _Session(len(self.all_sessions), self._pick_port(), n, self.loop.now)
        self.sessions[sess.src_port] = sess
        self.all_sessions.append(sess)
        dst, dport = self.target
        syn = codec.encode_tcp_frame(self.client_addr, dst, sess.src_port, dport, flags=TCP_SYN,
                                     seq=self.rng.getrandbits(32))
        self.send_from(self.client, syn, dst)

    def _send_request(self, sess: _Session, ack_of: PacketHeaders, measure_from: Optional[float] = None) -> None:
        dst, dport = self.target
        req = codec.encode_tcp_frame(self.client_addr, dst, sess.src_port, dport, REQUEST_BYTES,
                                     flags=TCP_PSH | TCP_ACK, seq=ack_of.tcp.ack,
                                     ack=(ack_of.tcp.seq + 1) & 0xFFFFFFFF)
        sess.sent_at = self.loop.now if measure_from is None else measure_from
        self.send_from(self.client, req, dst)

    def _client(self, frame: bytes) -> None:
        h = codec.parse_packet(frame)
        tcp = h.tcp
        if tcp is None or not codec.verify_frame(frame):
            self.drops["client-bad-packet"] += 1
            return
        if (h.ipv4.src_addr, tcp.src_port) != self.target:
            # reply not rewritten back to the service address
            self.drops["client-unexpected-source"] += 1
            return
        sess = self.sessions.get(tcp.dst_port)
        if sess is None:
            self.drops["client-no-session"] += 1
            return
        if tcp.flags & TCP_SYN:
            # the first request's time includes the handshake
            self._send_request(sess, h, measure_from=sess.started)
            return
        self.report.request_times.append(self.loop.now - sess.sent_at)
        sess.done += 1
        if sess.done < sess.n_requests:
            self._send_request(sess, h)
        else:
            del self.sessions[sess.src_port]
            if self.sc.session_interval is None:
                self._start_session()

    # -- driver ------------------------------------------------------------

    def schedule_traffic(self) -> None:
        sc = self.sc
        remaining = sc.total_requests
        while remaining > 0:
            n = min(sc.requests_per_session, remaining)
            self.plan.append(n)
            remaining -= n
        self.planned_requests = sc.total_requests
        self.report.sessions = len(self.plan)
        if sc.session_interval is None:
            for _ in range(min(sc.concurrency, len(self.plan))):
                self.loop.at(sc.start_time, self._start_session)
        else:
            for i in range(len(self.plan)):
                self.loop.at(sc.start_time + i * sc.session_interval, self._start_session)
        if self.agent is not None:
            self.loop.at(sc.start_time, self._check_initialized)

    def _check_initialized(self) -> None:
        if not self.router.registry.initialized:
            self.report.invariant_failures.append(
                f"registry not initialized when traffic started at t={self.loop.now:.6f}")

    def start_agent(self) -> None:
        if self.agent is not None:
            self.loop.at(0.0, self._agent_poll)

    def finish(self, static_registry: bool = True) -> SimReport:
        r = self.report
        r.per_node_request_counts = {w: self.served.get(w, 0) for w in self.workers}
        r.completed_requests = len(r.request_times)
        r.dropped_requests = self.planned_requests - r.completed_requests
        if self.sc.mode is Mode.IN_NETWORK:
            r.affinity_violations = sum(1 for s in self.all_sessions if len(s.workers) > 1)
            r.registry_generation = self.router.registry.generation
            if static_registry and r.affinity_violations:
                r.invariant_failures.append(
                    f"{r.affinity_violations} sessions reached more than one worker")
        if sum(r.per_node_request_counts.values()) != r.completed_requests:
            r.invariant_failures.append(
                f"served {sum(r.per_node_request_counts.values())} requests but "
                f"{r.completed_requests} completed")
        if r.completed_requests + r.dropped_requests != self.planned_requests:
            r.invariant_failures.append("request conservation violated")
        if r.dropped_requests and not r.invariant_failures:
            # a static, correctly configured run never loses packets
            r.invariant_failures.append(
                f"{r.dropped_requests} requests dropped: {dict(sorted(self.drops.items()))}")
        return r


def run_scenario(sim: Simulation, scenario: Scenario) -> SimReport:
    state = sim.default_state(scenario)
    run = _Run(sim, scenario, state)
    weights = Counter(run.addr_to_node[r.node_addr] for r in state.running)
    run.report.expected_weights = {w: weights.get(w, 0) for w in run.workers}
    if scenario.total_requests <= 0:
        run.report.per_node_request_counts = {w: 0 for w in run.workers}
        return run.report
    run.start_agent()
    run.schedule_traffic()
    end = None
    if run.agent is not None:
        # the agent polls forever; stop once traffic has drained
        end = _drain_bound(scenario)
    run.loop.run(until=end)
    return run.finish()


def _drain_bound(sc: Scenario) -> float:
    per_req = 64 * (sc.hop_latency or 0.01) + 8 * max(sc.router_delay, sc.effective_cp_delay, sc.lb_delay) \
        + sc.server_time + sc.lb_setup_latency
    sessions = math.ceil(sc.total_requests / sc.requests_per_session)
    if sc.session_interval is None:
        rounds = math.ceil(sessions / sc.concurrency)
        return sc.start_time + rounds * (sc.requests_per_session + 1) * per_req + 1.0
    return sc.start_time + sessions * sc.session_interval + (sc.requests_per_session + 1) * per_req + 1.0


def run_state_change_experiment(
    sim: Simulation,
    change_at: float,
    change: ClusterState,
    scenario: Optional[Scenario] = None,
    *,
    duration_after: float = 10.0,
) -> SimReport:
    """Open-loop in-network traffic with a cluster state change at ``change_at``.

    The report's ``registry_update_latency`` is the time from the change to
    the router consuming the resulting control packet; ``removed_node_selections``
    counts ECMP selections of nodes outside the new Running set after that.
    """
    sc = scenario or Scenario(mode=Mode.IN_NETWORK, concurrency=1, session_interval=0.05,
                              total_requests=0)
    if sc.mode is not Mode.IN_NETWORK:
        raise SimError("state change experiment requires in-network mode")
    if sc.session_interval is None:
        sc = replace(sc, session_interval=0.05)
    total = int((change_at + duration_after - sc.start_time) / sc.session_interval) * sc.requests_per_session
    sc = replace(sc, total_requests=max(total, sc.concurrency), concurrency=1)

    run = _Run(sim, sc, sim.default_state(sc))
    run.start_agent()
    run.schedule_traffic()

    def apply_change():
        run.state_source.state = change

    run.loop.at(change_at, apply_change)
    run.loop.run(until=_drain_bound(sc))
    report = run.finish(static_registry=False)

    gen_before = max((g for t, g in run.generation_times if t <= change_at), default=0)
    after = [(t, g) for t, g in run.generation_times if t > change_at and g > gen_before]
    new_set = {r.node_addr for r in change.running}
    if after:
        t_update = after[0][0]
        report.registry_update_latency = t_update - change_at
        post = [addr for t, addr in run.selections if t >= t_update]
        report.removed_node_selections = sum(1 for a in post if a not in new_set)
        counts = Counter(run.addr_to_node[a] for a in post)
        report.post_update_counts = {w: counts.get(w, 0) for w in run.workers}
    else:
        report.invariant_failures.append("registry never updated after the state change")
    return report


def scaled_state(sim: Simulation, base: ClusterState, workers: list[str]) -> ClusterState:
    """Cluster state with Running pods only on ``workers``; others Terminating."""
    keep = Counter(sim.addr_of(w) for w in workers)
    replicas = []
    for r in base.replicas:
        if keep[r.node_addr] > 0:
            keep[r.node_addr] -= 1
            replicas.append(r)
        else:
            replicas.append(Replica(r.pod_id, r.node_addr, Phase.TERMINATING))
    i = len(replicas)
    for addr, n in sorted(keep.items()):
        for _ in range(n):
            replicas.append(Replica(f"pod-{i}", addr, Phase.RUNNING))
            i += 1
    return replace(base, replicas=tuple(replicas))
