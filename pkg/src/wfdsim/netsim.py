"""Seeded discrete-event engine with an interface-affine radio model.

Time is integer microseconds. Every transmission is serialized on two
deterministic clocks: the sending node's radio (one server per device, shared
by both interfaces of a relay) and the group's shared medium. Service on the
node server is the on-air time at the effective channel rate plus a
per-packet stack overhead, with an extra forwarding overhead when the packet
was received rather than originated (larger when it crosses interfaces).
Queueing, drops and delivery times all fall out of those two clocks, so a
run is reproducible bit-for-bit from its inputs.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import protocol, routing
from .core import (
    CredentialBundle,
    DEFAULT_GO_ADDR,
    Endpoint,
    FIRST_LEGACY_ADDR,
    FIRST_PEER_ADDR,
    GroupId,
    InterfaceKind,
    Message,
    NodeId,
    Publication,
    TopicId,
)
from .protocol import (
    Action,
    DeliverLocal,
    Directory,
    NodeState,
    ProtocolParams,
    RoleChange,
    Send,
    SetTimer,
    T_ATTACH,
    T_BEACON,
    T_LIVENESS,
)

EV_DELIVER = 0
EV_TIMER = 1
EV_CMD = 2

SVC_ORIGIN = 0
SVC_FWD_SAME = 1
SVC_FWD_CROSS = 2

# Global audit counters; the acceptance suite asserts both stay at zero.
AUDIT = {"affinity": 0, "scope": 0}


class AffinityError(AssertionError):
    """Traffic tried to leave its interface domain."""


@dataclass(slots=True)
class SimConfig:
    """Radio, queue and protocol timing knobs.

    ``channel_bps`` is the effective per-node application-level channel rate;
    it is the calibration knob for absolute throughput. The group medium runs
    at ``medium_share`` times that rate (PHY headroom over the app-level
    bottleneck) and is tracked so per-group airtime stays conserved.
    """

    channel_bps: int = 22_000_000
    medium_share: float = 2.5
    stack_overhead_us: int = 45
    forward_same_us: int = 57
    forward_cross_us: int = 127
    payload_bytes: int = 1400
    queue_packets: int = 100
    latency_us: int = 1000
    beacon_period_us: int = 1_000_000
    beacon_timeout_us: int = 3_000_000
    join_retry_us: int = 2_000_000
    join_attempts: int = 3
    attach_delay_us: int = 100_000
    seen_cache: int = 4096
    anchor_fanout: str = routing.SUBSCRIBER_DIRECTED

    def params(self) -> ProtocolParams:
        return ProtocolParams(
            beacon_period_us=self.beacon_period_us,
            beacon_timeout_us=self.beacon_timeout_us,
            join_retry_us=self.join_retry_us,
            join_attempts=self.join_attempts,
            attach_delay_us=self.attach_delay_us,
            seen_cache=self.seen_cache,
            anchor_fanout=self.anchor_fanout,
        )


@dataclass(frozen=True, slots=True)
class NetGroup:
    gid: GroupId
    ssid: str
    passphrase: str
    owner: NodeId


@dataclass(frozen=True, slots=True)
class TrafficGenerator:
    """Constant-bit-rate publication source."""

    source: NodeId
    topic: TopicId
    offered_load_bps: int
    packet_payload: int
    duration_us: int


def generate_traffic(gen: TrafficGenerator, start_us: int = 0) -> list[int]:
    """Deterministic, evenly spaced publish instants for one generator."""
    if gen.offered_load_bps <= 0:
        raise ValueError("offered load must be positive")
    bits = gen.packet_payload * 8
    count = (gen.duration_us * gen.offered_load_bps) // (bits * 1_000_000)
    return [start_us + (i * bits * 1_000_000) // gen.offered_load_bps for i in range(count)]


@dataclass(slots=True)
class RunCounters:
    """Flow-scoped counters for one run (the designated source/topic/sink)."""

    packets_sent: int = 0
    packets_delivered: int = 0
    bytes_delivered: int = 0
    queue_drops: int = 0
    dead_node_losses: int = 0
    source_backpressure: int = 0
    hops_observed: int = 0
    duration_us: int = 0

    @property
    def in_flight_at_end(self) -> int:
        return self.packets_sent - self.packets_delivered - self.queue_drops - self.dead_node_losses

    @property
    def throughput_bps(self) -> float:
        if self.duration_us <= 0:
            return 0.0
        return self.bytes_delivered * 8 * 1_000_000 / self.duration_us

    @property
    def loss(self) -> float:
        if self.packets_sent == 0:
            return 0.0
        return 1.0 - self.packets_delivered / self.packets_sent


def mean(values: Iterable[float]) -> float:
    vals = list(values)
    return sum(vals) / len(vals) if vals else 0.0


class World:
    """Hosts the protocol machines on top of the event engine."""

    def __init__(
        self,
        groups: Iterable[NetGroup],
        membership: dict[NodeId, GroupId],
        cfg: Optional[SimConfig] = None,
        seed: int = 0,
        subscriptions: Optional[dict[NodeId, frozenset[TopicId]]] = None,
        trace: bool = False,
    ) -> None:
        self.cfg = cfg or SimConfig()
        self.seed = seed
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.groups = {g.gid: g for g in groups}
        self.directory = Directory()
        self.nodes: dict[NodeId, NodeState] = {}
        self.dead_since: dict[NodeId, int] = {}
        self.trace_lines: Optional[list[str]] = [] if trace else None

        self._node_free: dict[NodeId, int] = {}
        self._med_free: dict[GroupId, int] = {}
        self._queues: dict[tuple[NodeId, InterfaceKind], deque[int]] = {}
        self._next_legacy_addr: dict[GroupId, int] = {g: FIRST_LEGACY_ADDR for g in self.groups}

        self.flow_source: Optional[NodeId] = None
        self.flow_topic: Optional[TopicId] = None
        self.flow_sink: Optional[NodeId] = None
        self.counters = RunCounters()
        self.delivered_at: dict[NodeId, int] = {}
        self.local_deliveries: list[tuple[int, NodeId, TopicId]] = []

        params = self.cfg.params()
        subscriptions = subscriptions or {}
        addr_next: dict[GroupId, int] = {g: FIRST_PEER_ADDR for g in self.groups}
        for node in sorted(membership):
            gid = membership[node]
            group = self.groups[gid]
            is_owner = group.owner == node
            addr = DEFAULT_GO_ADDR if is_owner else addr_next[gid]
            if not is_owner:
                addr_next[gid] += 1
            ep = Endpoint(node, InterfaceKind.P2P_NATIVE, gid, addr)
            self.directory.register(ep, group.ssid, is_owner=is_owner)
            self.nodes[node] = NodeState(
                node,
                gid,
                self.directory,
                params,
                is_owner=is_owner,
                topics=subscriptions.get(node, frozenset()),
            )
            self._node_free[node] = 0
        for gid in self.groups:
            self._med_free[gid] = 0

        # Stagger the periodic timers deterministically by node order.
        for i, node in enumerate(sorted(self.nodes)):
            self.schedule(500 + i * 1_000, EV_TIMER, node, (T_LIVENESS, None))
            self.schedule(1_000 + i * 1_000, EV_TIMER, node, (T_BEACON, None))

    # -- engine -------------------------------------------------------------

    def schedule(self, at_us: int, kind: int, a, b) -> None:
        if at_us < self.now:
            raise ValueError(f"cannot schedule at {at_us} before now={self.now}")
        self._seq += 1
        heapq.heappush(self._heap, (at_us, self._seq, kind, a, b))

    def run_until(self, t_end_us: int) -> None:
        if t_end_us < self.now:
            raise ValueError("t_end precedes the clock")
        heap = self._heap
        while heap and heap[0][0] <= t_end_us:
            t, _, kind, a, b = heapq.heappop(heap)
            self.now = t
            if kind == EV_DELIVER:
                self._on_deliver(a, b)
            elif kind == EV_TIMER:
                self._on_timer(a, b)
            else:
                self._on_command(a, b)
        self.now = t_end_us

    # -- command surface ------------------------------------------------------

    def set_flow(self, source: NodeId, topic: TopicId, sink: NodeId) -> None:
        self.flow_source = source
        self.flow_topic = topic
        self.flow_sink = sink

    def at(self, t_us: int, command: tuple) -> None:
        self.schedule(t_us, EV_CMD, command, None)

    def kill(self, node: NodeId) -> None:
        self.dead_since[node] = self.now

    def alive(self, node: NodeId) -> bool:
        return node not in self.dead_since

    def _on_command(self, command: tuple, _unused) -> None:
        op = command[0]
        if op == "kill":
            self.kill(command[1])
            self._trace("DIE", command[1], "-", 0)
            return
        node = self.nodes[command[1]]
        if not self.alive(node.id):
            return
        if op == "join":
            actions = node.start_join(node.native_group, self.now)
        elif op == "subscribe":
            actions = node.subscribe(command[2], self.now)
        elif op == "unsubscribe":
            actions = node.unsubscribe(command[2], self.now)
        elif op == "publish":
            actions = node.publish(command[2], command[3], self.now)
        elif op == "promote":
            actions = node.promote(command[2], command[3], self.now)
        else:
            raise ValueError(f"unknown command {op}")
        self._execute(node, actions, None)

    # -- event handlers -------------------------------------------------------

    def _measured(self, msg: Message) -> bool:
        return (
            isinstance(msg, Publication)
            and msg.topic == self.flow_topic
            and msg.pub_id.origin == self.flow_source
        )

    def _on_deliver(self, msg: Message, svc_start: int) -> None:
        src = msg.src.node
        died = self.dead_since.get(src)
        if died is not None and died <= svc_start:
            # The packet was still queued at the sender when it died.
            if self._measured(msg):
                self.counters.dead_node_losses += 1
            return
        dst = msg.dst.node
        if not self.alive(dst):
            if self._measured(msg):
                self.counters.dead_node_losses += 1
            return
        self._trace("RCV", src, dst, msg.size_bytes)
        node = self.nodes[dst]
        actions = node.on_message(msg, self.now)
        arrival_iface = msg.dst.iface if isinstance(msg, Publication) else None
        self._execute(node, actions, arrival_iface)

    def _on_timer(self, node_id: NodeId, spec: tuple) -> None:
        kind, payload = spec
        if not self.alive(node_id):
            return
        node = self.nodes[node_id]
        if kind == T_ATTACH:
            self._do_attach(node)
            return
        actions = node.on_timer(kind, payload, self.now)
        self._execute(node, actions, None)

    def _do_attach(self, node: NodeState) -> None:
        """Complete a legacy association requested by a promotion."""
        creds = node.pending_creds
        ok = False
        ep: Optional[Endpoint] = None
        if creds is not None and creds.group in self.groups:
            group = self.groups[creds.group]
            if creds.passphrase == group.passphrase and creds.ssid == group.ssid:
                addr = self._next_legacy_addr[creds.group]
                self._next_legacy_addr[creds.group] += 1
                ep = Endpoint(node.id, InterfaceKind.LEGACY_CLIENT, creds.group, addr)
                self.directory.register(ep, group.ssid)
                ok = True
        actions = node.on_attach_result(ok, ep, self.now)
        self._execute(node, actions, None)

    # -- actions --------------------------------------------------------------

    def _execute(self, node: NodeState, actions: list[Action], arrival_iface) -> None:
        for act in actions:
            if isinstance(act, Send):
                msg = act.message
                svc_class = SVC_ORIGIN
                if isinstance(msg, Publication) and arrival_iface is not None:
                    if act.via is not arrival_iface:
                        svc_class = SVC_FWD_CROSS
                    else:
                        svc_class = SVC_FWD_SAME
                self.transmit(node, msg, act.via, svc_class)
            elif isinstance(act, SetTimer):
                self.schedule(self.now + act.delay_us, EV_TIMER, node.id, (act.kind, act.payload))
            elif isinstance(act, DeliverLocal):
                self._local_delivery(node, act.publication)
            elif isinstance(act, RoleChange):
                self._trace("ROL", node.id, act.role.value, 0)
            else:
                raise TypeError(f"unknown action {act}")

    def _local_delivery(self, node: NodeState, pub: Publication) -> None:
        self._trace("APP", pub.pub_id.origin, node.id, pub.payload_bytes)
        self.local_deliveries.append((self.now, node.id, pub.topic))
        self.delivered_at[node.id] = self.now
        if self._measured(pub) and node.id == self.flow_sink:
            self.counters.packets_delivered += 1
            self.counters.bytes_delivered += pub.payload_bytes
            if pub.hops > self.counters.hops_observed:
                self.counters.hops_observed = pub.hops

    def transmit(self, node: NodeState, msg: Message, via: InterfaceKind, svc_class: int = SVC_ORIGIN) -> None:
        """Serialize one message onto the sender's radio and group medium.

        Cross-group traffic without a legacy endpoint is a hard failure:
        interface affinity must hold by construction.
        """
        src, dst = msg.src, msg.dst
        if src.node != node.id or src.iface is not via:
            AUDIT["affinity"] += 1
            raise AffinityError(f"{node.id} sent from an interface it does not hold: {src}")
        if src.group != dst.group:
            AUDIT["affinity"] += 1
            raise AffinityError(f"cross-group transmit {src.group} -> {dst.group} without a legacy endpoint")
        if src.iface is InterfaceKind.LEGACY_CLIENT and dst.iface is InterfaceKind.LEGACY_CLIENT:
            AUDIT["affinity"] += 1
            raise AffinityError("legacy-to-legacy pairing has no native endpoint in the group")

        cfg = self.cfg
        now = self.now
        measured = self._measured(msg)
        is_pub = isinstance(msg, Publication)
        if is_pub:
            q = self._queues.get((src.node, via))
            if q is None:
                q = deque()
                self._queues[(src.node, via)] = q
            while q and q[0] <= now:
                q.popleft()
            if len(q) >= cfg.queue_packets:
                # Drop-newest policy; control messages are exempt from capacity.
                if measured:
                    if src.node == msg.pub_id.origin:
                        self.counters.source_backpressure += 1
                    else:
                        self.counters.queue_drops += 1
                self._trace("DRP", src.node, dst.node, msg.size_bytes)
                return
        else:
            q = None

        bits = msg.size_bytes * 8
        svc = (bits * 1_000_000 + cfg.channel_bps - 1) // cfg.channel_bps + cfg.stack_overhead_us
        if svc_class == SVC_FWD_SAME:
            svc += cfg.forward_same_us
        elif svc_class == SVC_FWD_CROSS:
            svc += cfg.forward_cross_us
        start = max(now, self._node_free[src.node])
        self._node_free[src.node] = start + svc
        if q is not None:
            q.append(start)
        med_bps = int(cfg.channel_bps * cfg.medium_share)
        med_air = (bits * 1_000_000 + med_bps - 1) // med_bps
        med_start = max(start + svc, self._med_free[src.group])
        self._med_free[src.group] = med_start + med_air
        arrive = med_start + med_air + cfg.latency_us

        if measured and src.node == msg.pub_id.origin:
            self.counters.packets_sent += 1
        self._trace("SND", src.node, dst.node, msg.size_bytes)
        self.schedule(arrive, EV_DELIVER, msg, start)

    def _trace(self, kind: str, src, dst, size: int) -> None:
        if self.trace_lines is not None:
            self.trace_lines.append(f"{self.now} {kind} {src} {dst} {size}")

    # -- bookkeeping ----------------------------------------------------------

    def collect(self, duration_us: int) -> RunCounters:
        self.counters.duration_us = duration_us
        assert self.counters.in_flight_at_end >= 0, "conservation violated"
        return self.counters

    def promote_credentials(self, group: GroupId) -> CredentialBundle:
        g = self.groups[group]
        return CredentialBundle(group=g.gid, ssid=g.ssid, passphrase=g.passphrase)

    def node_tables(self) -> dict[NodeId, dict]:
        """Canonical live forwarding state, for convergence checks."""
        out = {}
        for n in sorted(self.nodes):
            if self.alive(n):
                out[n] = self.nodes[n].table.as_dict()
        return out

    def node_subscriptions(self) -> dict[NodeId, frozenset[TopicId]]:
        """Live nodes' local subscription sets (the ground-truth input)."""
        return {
            n: self.nodes[n].local_topics for n in sorted(self.nodes) if self.alive(n)
        }
