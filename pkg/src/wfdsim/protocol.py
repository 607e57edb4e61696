"""Per-device event-driven protocol machine.

Each node is a deterministic function (state, event, now) -> actions. The
host simulator delivers messages and timer fires, and executes the returned
actions; nothing here performs I/O.

Anchors do not replicate a global view. Each anchor keeps its attached
members' subscription sets plus one aggregated interest set per neighbouring
anchor, exchanged as full-set advertisements over the backbone tree. That
split-horizon aggregation makes the distributed tables equal, after
quiescence, to a centralized recomputation from global state.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import routing
from .core import (
    Beacon,
    CredentialBundle,
    DEFAULT_GO_ADDR,
    Endpoint,
    GroupId,
    InterfaceKind,
    JoinAccept,
    JoinRedirect,
    JoinRequest,
    Message,
    NodeId,
    PromoteToRelay,
    Publication,
    PublicationId,
    RelayAck,
    Role,
    RoutingPush,
    SubscriptionUpdate,
    TopicId,
)
from .routing import ForwardingTable, forward_decision

# Timer kinds.
T_BEACON = "beacon"
T_LIVENESS = "liveness"
T_JOIN_RETRY = "join-retry"
T_ATTACH = "attach"

# Membership note kinds held by a group owner.
NOTE_PEER = "peer"
NOTE_NATIVE_RELAY = "native-relay"
NOTE_VISITING_RELAY = "visiting-relay"


class ScopeError(AssertionError):
    """A secondary relay tried to address a non-anchor node of its visited group."""


@dataclass(frozen=True, slots=True)
class Send:
    message: Message
    via: InterfaceKind


@dataclass(frozen=True, slots=True)
class DeliverLocal:
    publication: Publication


@dataclass(frozen=True, slots=True)
class SetTimer:
    kind: str
    delay_us: int
    payload: Optional[str] = None


@dataclass(frozen=True, slots=True)
class RoleChange:
    role: Role


Action = Send | DeliverLocal | SetTimer | RoleChange


@dataclass(slots=True)
class ProtocolParams:
    beacon_period_us: int = 1_000_000
    beacon_timeout_us: int = 3_000_000  # three missed beacons
    join_retry_us: int = 2_000_000
    join_attempts: int = 3
    attach_delay_us: int = 100_000
    seen_cache: int = 4096
    anchor_fanout: str = routing.SUBSCRIBER_DIRECTED


class Directory:
    """Group-scoped endpoint lookup (the modeled L2 neighbour discovery).

    Owned by the simulator; nodes only read it.
    """

    def __init__(self) -> None:
        self._by_node: dict[NodeId, dict[GroupId, Endpoint]] = {}
        self._go: dict[GroupId, NodeId] = {}
        self._ssid: dict[GroupId, str] = {}

    def register(self, ep: Endpoint, ssid: str, is_owner: bool = False) -> None:
        self._by_node.setdefault(ep.node, {})[ep.group] = ep
        self._ssid.setdefault(ep.group, ssid)
        if is_owner:
            self._go[ep.group] = ep.node

    def unregister(self, node: NodeId, group: GroupId) -> None:
        self._by_node.get(node, {}).pop(group, None)

    def endpoint(self, node: NodeId, group: GroupId) -> Optional[Endpoint]:
        return self._by_node.get(node, {}).get(group)

    def groups_of(self, node: NodeId) -> dict[GroupId, Endpoint]:
        return self._by_node.get(node, {})

    def go_of(self, group: GroupId) -> NodeId:
        return self._go[group]

    def ssid(self, group: GroupId) -> str:
        return self._ssid[group]


@dataclass(slots=True)
class Attachment:
    """Join/anchoring state of one group membership."""

    group: GroupId
    anchor: Optional[NodeId] = None
    target: Optional[NodeId] = None
    attempts: int = 0
    inflight: bool = False
    fell_back: bool = False


class NodeState:
    """Deterministic protocol machine for one device."""

    def __init__(
        self,
        node_id: NodeId,
        native_group: GroupId,
        directory: Directory,
        params: ProtocolParams,
        is_owner: bool = False,
        topics: frozenset[TopicId] = frozenset(),
    ) -> None:
        self.id = node_id
        self.native_group = native_group
        self.directory = directory
        self.params = params
        self.role = Role.GROUP_OWNER if is_owner else Role.ORDINARY_PEER
        self.local_topics: frozenset[TopicId] = topics
        self.table: ForwardingTable = ForwardingTable(node_id)
        self.seq = 0
        self.beacon_seq = 0
        self.seen: OrderedDict[PublicationId, None] = OrderedDict()
        self.errors: list[str] = []

        self.attachments: dict[GroupId, Attachment] = {}
        self.visited_group: Optional[GroupId] = None
        self.pending_creds: Optional[CredentialBundle] = None
        self.promoter: Optional[NodeId] = None

        # Group-owner bookkeeping.
        self.owns_group: Optional[GroupId] = native_group if is_owner else None
        self.member_notes: dict[NodeId, str] = {}
        self.liveness: dict[NodeId, int] = {}
        self.go_anchor: NodeId = node_id if is_owner else ""
        self.pending_promotion: Optional[NodeId] = None

        # Anchor bookkeeping (a GO in single-group mode, or a relay).
        self.anchored_groups: set[GroupId] = set()
        self.member_subs: dict[NodeId, frozenset[TopicId]] = {}
        self.member_group: dict[NodeId, GroupId] = {}
        self.neighbor_interest: dict[NodeId, frozenset[TopicId]] = {}
        self.neighbor_via: dict[NodeId, InterfaceKind] = {}
        self.neighbor_liveness: dict[NodeId, int] = {}
        self.pushed: dict[NodeId, tuple] = {}
        self.advertised: dict[NodeId, frozenset[TopicId]] = {}

        self.attachments[native_group] = Attachment(native_group)
        if is_owner:
            self.attachments[native_group].anchor = node_id
            self.anchored_groups.add(native_group)
            self.member_subs[node_id] = topics
            self.member_group[node_id] = native_group

    # -- helpers -----------------------------------------------------------

    @property
    def endpoints(self) -> dict[InterfaceKind, Endpoint]:
        eps = {}
        for group, ep in self.directory.groups_of(self.id).items():
            eps[ep.iface] = ep
        return eps

    def is_owner(self) -> bool:
        return self.owns_group is not None

    def is_relay(self) -> bool:
        return self.visited_group is not None

    def anchors(self, group: GroupId) -> bool:
        return group in self.anchored_groups

    def _go_of(self, group: GroupId) -> NodeId:
        return self.directory.go_of(group)

    def _scope_allows(self, group: GroupId, dst: NodeId, handshake: bool = False) -> bool:
        """Scope rule: on its visited group a non-anchoring relay may address
        only that group's anchor (plus the owner during the join handshake)."""
        my_ep = self.directory.endpoint(self.id, group)
        if my_ep is None:
            return False
        if my_ep.iface is InterfaceKind.LEGACY_CLIENT and not self.anchors(group):
            att = self.attachments.get(group)
            allowed = {att.anchor, att.target} if att else set()
            if handshake:
                allowed.add(self._go_of(group))
            return dst in allowed
        return True

    def _send_in_group(
        self,
        group: GroupId,
        dst: NodeId,
        build: Callable[[Endpoint, Endpoint], Message],
        handshake: bool = False,
    ) -> Send:
        if not self._scope_allows(group, dst, handshake):
            raise ScopeError(f"secondary relay {self.id} addressed {dst} in visited group {group}")
        src_ep = self.directory.endpoint(self.id, group)
        dst_ep = self.directory.endpoint(dst, group)
        if src_ep is None or dst_ep is None:
            raise LookupError(f"no path from {self.id} to {dst} inside group {group}")
        return Send(build(src_ep, dst_ep), src_ep.iface)

    def _send(self, dst: NodeId, build: Callable[[Endpoint, Endpoint], Message], handshake: bool = False) -> Send:
        """Send over whichever shared group reaches ``dst``, native side first."""
        mine = self.directory.groups_of(self.id)
        for group, my_ep in sorted(
            mine.items(), key=lambda kv: kv[1].iface is not InterfaceKind.P2P_NATIVE
        ):
            if self.directory.endpoint(dst, group) is not None:
                return self._send_in_group(group, dst, build, handshake)
        raise LookupError(f"{self.id} has no interface reaching {dst}")

    def _reply(self, msg: Message, build: Callable[[Endpoint, Endpoint], Message]) -> list[Send]:
        """Answer within the requester's group; silently drop if the scope
        rule forbids addressing them (they will retry and fall back)."""
        group = msg.dst.group
        if not self._scope_allows(group, msg.src.node, handshake=True):
            return []
        return [Send(build(msg.dst, msg.src), msg.dst.iface)]

    def _aggregate_behind(self, excluding: Optional[NodeId] = None) -> frozenset[TopicId]:
        acc: set[TopicId] = set(self.local_topics)
        for subs in self.member_subs.values():
            acc |= subs
        for n, interest in self.neighbor_interest.items():
            if n != excluding:
                acc |= interest
        return frozenset(acc)

    # -- anchor-side recomputation ------------------------------------------

    def _recompute_and_distribute(self, now: int, accept_for: Optional[NodeId] = None) -> list[Action]:
        """Recompute own and member tables and emit pushes plus adverts for
        whatever changed. ``accept_for`` gets a JoinAccept instead of a push."""
        actions: list[Action] = []
        live_topics = sorted(self._aggregate_behind())

        own: dict[TopicId, list[NodeId]] = {}
        for m in sorted(self.member_subs):
            if m == self.id:
                continue
            for t in self.member_subs[m]:
                own.setdefault(t, []).append(m)
        for n in sorted(self.neighbor_interest):
            for t in self.neighbor_interest[n]:
                own.setdefault(t, []).append(n)
        if self.params.anchor_fanout == routing.ALL_ENDPOINTS and self.is_relay():
            legacy_side = [
                m
                for m in sorted(self.member_subs)
                if m != self.id and self.member_group.get(m) == self.visited_group
            ] + [
                n
                for n in sorted(self.neighbor_interest)
                if self.neighbor_via.get(n) is InterfaceKind.LEGACY_CLIENT
            ]
            for t in live_topics:
                hops = own.setdefault(t, [])
                for v in legacy_side:
                    if v not in hops:
                        hops.append(v)
        self.table = ForwardingTable.build(self.id, own)

        member_entries = tuple((t, (self.id,)) for t in live_topics)
        for m in sorted(self.member_subs):
            if m == self.id:
                continue
            if self.pushed.get(m) != member_entries or m == accept_for:
                self.pushed[m] = member_entries
                if m == accept_for:
                    actions.append(
                        self._send(
                            m,
                            lambda s, d, e=member_entries: JoinAccept(s, d, anchor=self.id, entries=e),
                        )
                    )
                else:
                    actions.append(
                        self._send(m, lambda s, d, e=member_entries: RoutingPush(s, d, entries=e))
                    )
        for n in sorted(self.neighbor_interest):
            agg = self._aggregate_behind(excluding=n)
            if self.advertised.get(n) != agg:
                self.advertised[n] = agg
                actions.append(
                    self._send(
                        n,
                        lambda s, d, a=agg: SubscriptionUpdate(s, d, subject=self.id, topics=a),
                    )
                )
        return actions

    def _integrate_member(self, joiner: NodeId, group: GroupId, subs: frozenset[TopicId], now: int) -> list[Action]:
        self.neighbor_interest.pop(joiner, None)
        self.neighbor_via.pop(joiner, None)
        self.neighbor_liveness.pop(joiner, None)
        self.member_subs[joiner] = subs
        self.member_group[joiner] = group
        return self._recompute_and_distribute(now, accept_for=joiner)

    def _attach_neighbor(self, joiner: NodeId, subs: frozenset[TopicId], via: InterfaceKind, now: int) -> list[Action]:
        if joiner in self.member_subs and joiner != self.id:
            del self.member_subs[joiner]
            self.member_group.pop(joiner, None)
            self.pushed.pop(joiner, None)
        self.neighbor_interest[joiner] = subs
        self.neighbor_via[joiner] = via
        self.neighbor_liveness[joiner] = now
        return self._recompute_and_distribute(now)

    def _become_anchor(self, group: GroupId, now: int) -> list[Action]:
        actions: list[Action] = []
        if group not in self.anchored_groups:
            self.anchored_groups.add(group)
            att = self.attachments.setdefault(group, Attachment(group))
            att.anchor = self.id
            att.inflight = False
            if group == self.native_group and self.id not in self.member_subs:
                self.member_subs[self.id] = self.local_topics
                self.member_group[self.id] = self.native_group
            if not self.is_owner() and self.role is not Role.PRIMARY_RELAY:
                self.role = Role.PRIMARY_RELAY
                actions.append(RoleChange(Role.PRIMARY_RELAY))
            actions += self._recompute_and_distribute(now)
        return actions

    def _drop_anchorship(self, new_anchor: NodeId) -> None:
        """Hand the anchor role elsewhere; local routing state rebuilds via rejoin."""
        self.anchored_groups.clear()
        self.member_subs.clear()
        self.member_group.clear()
        self.pushed.clear()
        self.advertised.clear()
        self.neighbor_interest.clear()
        self.neighbor_via.clear()
        self.neighbor_liveness.clear()
        att = self.attachments[self.native_group]
        att.anchor = None
        att.target = new_anchor

    # -- join ---------------------------------------------------------------

    def _join_material(self, group: GroupId) -> tuple[frozenset[TopicId], bool]:
        if group == self.visited_group:
            return self._aggregate_behind(), True
        return self.local_topics, False

    def _send_join(self, group: GroupId, now: int) -> list[Action]:
        att = self.attachments[group]
        assert att.target is not None
        my_ep = self.directory.endpoint(self.id, group)
        if my_ep is None:
            return []
        subs, is_relay = self._join_material(group)
        ssid = self.directory.ssid(group)
        att.inflight = True
        actions: list[Action] = [
            self._send_in_group(
                group,
                att.target,
                lambda s, d: JoinRequest(
                    s, d, node=self.id, addr=my_ep.addr, ssid=ssid, subscriptions=subs, is_relay=is_relay
                ),
                handshake=True,
            ),
            SetTimer(T_JOIN_RETRY, self.params.join_retry_us, payload=group),
        ]
        return actions

    def start_join(self, group: GroupId, now: int, target: Optional[NodeId] = None) -> list[Action]:
        att = self.attachments.setdefault(group, Attachment(group))
        att.target = target or att.target or self._go_of(group)
        att.attempts = 1
        att.anchor = None
        return self._send_join(group, now)

    def _join_retry(self, group: GroupId, now: int) -> list[Action]:
        att = self.attachments.get(group)
        if att is None or not att.inflight or att.anchor is not None:
            return []
        go = self._go_of(group)
        if att.attempts < self.params.join_attempts and not (att.target != go and att.attempts >= 2):
            att.attempts += 1
            return self._send_join(group, now)
        if att.target != go and not att.fell_back:
            # Redirect target looks dead: fall back to an owner-anchored join.
            att.target = go
            att.fell_back = True
            att.attempts = 1
            return self._send_join(group, now)
        att.inflight = False
        if self.is_owner() and group == self.owns_group and att.target != self.id:
            # The owner could not reach the relay it delegated to; treat the
            # relay as lost and fail over again.
            dead = att.target
            if dead in self.member_notes:
                self._forget_member(dead)
            return self._relay_failover(now)
        self.errors.append(f"join to {att.target} for {group} gave up at t={now}")
        return []

    # -- spec operations ------------------------------------------------------

    def handle_join_request(self, msg: JoinRequest, now: int) -> list[Action]:
        group = msg.dst.group
        if msg.ssid != self.directory.ssid(group):
            return self._reply(msg, lambda s, d: RelayAck(s, d, ok=False, reason="ssid-mismatch"))

        if self.is_owner() and group == self.owns_group:
            joiner_home = self.directory.endpoint(msg.node, group)
            visiting = joiner_home is not None and joiner_home.iface is InterfaceKind.LEGACY_CLIENT
            if msg.is_relay:
                note = NOTE_VISITING_RELAY if visiting else NOTE_NATIVE_RELAY
            else:
                note = NOTE_PEER
            self.member_notes[msg.node] = note
            if note == NOTE_PEER or note == NOTE_NATIVE_RELAY or self.go_anchor == msg.node:
                self.liveness[msg.node] = now

            if self.go_anchor != self.id:
                return self._reply(msg, lambda s, d: JoinRedirect(s, d, target=self.go_anchor))
            if msg.is_relay and visiting:
                # First relay reaching a relay-less group takes over anchoring.
                return self._handover_anchor(msg.node, now)
            return self._integrate_member(msg.node, group, msg.subscriptions, now)

        if self.anchors(group):
            if msg.is_relay and msg.node not in self.member_subs:
                via = msg.dst.iface
                actions = self._reply(msg, lambda s, d: JoinAccept(s, d, anchor=self.id, entries=()))
                actions += self._attach_neighbor(msg.node, msg.subscriptions, via, now)
                return actions
            return self._integrate_member(msg.node, group, msg.subscriptions, now)

        att = self.attachments.get(group)
        if (
            att is not None
            and att.anchor is not None
            and att.anchor != self.id
            and att.anchor != msg.node
        ):
            return self._reply(msg, lambda s, d: JoinRedirect(s, d, target=att.anchor))
        return []

    def _handover_anchor(self, new_anchor: NodeId, now: int) -> list[Action]:
        """Owner-side: delegate anchoring of the owned group to a relay."""
        self.go_anchor = new_anchor
        self.liveness[new_anchor] = now
        self._refresh_tracking()
        self._drop_anchorship(new_anchor)
        actions: list[Action] = []
        for m in sorted(self.member_notes):
            if m != new_anchor:
                actions.append(self._send(m, lambda s, d, t=new_anchor: JoinRedirect(s, d, target=t)))
        actions.append(self._send(new_anchor, lambda s, d, t=new_anchor: JoinRedirect(s, d, target=t)))
        actions += self.start_join(self.owns_group, now, target=new_anchor)
        return actions

    def handle_join_redirect(self, msg: JoinRedirect, now: int) -> list[Action]:
        group = msg.dst.group
        att = self.attachments.get(group)
        if att is None:
            return []
        if msg.target == self.id:
            # Anchorship grant: the owner designates this relay as the group anchor.
            return self._become_anchor(group, now)
        if att.target == msg.target and (att.inflight or att.anchor == msg.target):
            return []
        if self.anchors(group):
            # The owner moved the group to another relay; hand over and rejoin.
            self._drop_group_anchorship(group)
        att.fell_back = False
        return self.start_join(group, now, target=msg.target)

    def _drop_group_anchorship(self, group: GroupId) -> None:
        """Stop anchoring ``group``; its members will rejoin the new anchor."""
        self.anchored_groups.discard(group)
        for m in [m for m, g in self.member_group.items() if g == group and m != self.id]:
            del self.member_subs[m]
            del self.member_group[m]
            self.pushed.pop(m, None)
        att = self.attachments.get(group)
        if att is not None:
            att.anchor = None

    def handle_join_accept(self, msg: JoinAccept, now: int) -> list[Action]:
        group = msg.dst.group
        att = self.attachments.get(group)
        if att is None:
            return []
        att.anchor = msg.anchor
        att.target = msg.anchor
        att.inflight = False
        att.fell_back = False
        actions: list[Action] = []
        if group == self.visited_group and not self.anchors(group):
            # Attached to the primary of the visited group: track it as an
            # anchor neighbour so interest flows both ways.
            if msg.anchor not in self.neighbor_interest:
                self.neighbor_interest[msg.anchor] = frozenset()
                self.neighbor_via[msg.anchor] = InterfaceKind.LEGACY_CLIENT
            self.neighbor_liveness[msg.anchor] = now
            actions += self._recompute_and_distribute(now)
        elif not self.anchored_groups:
            self.table = ForwardingTable(self.id, msg.entries)
        return actions

    def handle_subscription_update(self, msg: SubscriptionUpdate, now: int) -> list[Action]:
        subject = msg.subject
        if msg.topics is None:
            changed = False
            if subject in self.member_subs and subject != self.id:
                del self.member_subs[subject]
                self.member_group.pop(subject, None)
                self.pushed.pop(subject, None)
                changed = True
            if subject in self.neighbor_interest:
                del self.neighbor_interest[subject]
                self.neighbor_via.pop(subject, None)
                self.neighbor_liveness.pop(subject, None)
                self.advertised.pop(subject, None)
                changed = True
            return self._recompute_and_distribute(now) if changed else []
        if subject in self.member_subs and subject != self.id:
            if self.member_subs[subject] == msg.topics:
                return []
            self.member_subs[subject] = msg.topics
            return self._recompute_and_distribute(now)
        if subject in self.neighbor_interest:
            if self.neighbor_interest[subject] == msg.topics:
                return []
            self.neighbor_interest[subject] = msg.topics
            return self._recompute_and_distribute(now)
        return []

    def subscribe(self, topic: TopicId, now: int) -> list[Action]:
        return self._set_local_topics(routing.subscribe(self.local_topics, topic), now)

    def unsubscribe(self, topic: TopicId, now: int) -> list[Action]:
        return self._set_local_topics(routing.unsubscribe(self.local_topics, topic), now)

    def _set_local_topics(self, topics: frozenset[TopicId], now: int) -> list[Action]:
        if topics == self.local_topics:
            return []
        self.local_topics = topics
        if self.id in self.member_subs:
            self.member_subs[self.id] = topics
        if self.anchored_groups:
            return self._recompute_and_distribute(now)
        att = self.attachments.get(self.native_group)
        if att is not None and att.anchor is not None and att.anchor != self.id:
            return [
                self._send(
                    att.anchor,
                    lambda s, d: SubscriptionUpdate(s, d, subject=self.id, topics=topics),
                )
            ]
        return []

    def publish(self, topic: TopicId, payload_bytes: int, now: int) -> list[Action]:
        self.seq += 1
        pid = PublicationId(self.id, self.seq)
        deliver, hops = forward_decision(self.id, self.local_topics, self.table, topic, None)
        actions: list[Action] = []
        for hop in hops:
            actions.append(
                self._send(
                    hop,
                    lambda s, d: Publication(
                        s, d, pub_id=pid, topic=topic, payload_bytes=payload_bytes, hops=1
                    ),
                )
            )
        if deliver:
            ep = self.directory.endpoint(self.id, self.native_group)
            actions.append(
                DeliverLocal(
                    Publication(ep, ep, pub_id=pid, topic=topic, payload_bytes=payload_bytes, hops=0)
                )
            )
        return actions

    def handle_publication(self, msg: Publication, now: int) -> list[Action]:
        if msg.pub_id in self.seen:
            return []
        self.seen[msg.pub_id] = None
        if len(self.seen) > self.params.seen_cache:
            self.seen.popitem(last=False)
        deliver, hops = forward_decision(
            self.id, self.local_topics, self.table, msg.topic, msg.src.node
        )
        actions: list[Action] = []
        for hop in hops:
            actions.append(
                self._send(
                    hop,
                    lambda s, d: Publication(
                        s,
                        d,
                        pub_id=msg.pub_id,
                        topic=msg.topic,
                        payload_bytes=msg.payload_bytes,
                        hops=msg.hops + 1,
                    ),
                )
            )
        if deliver:
            actions.append(DeliverLocal(msg))
        return actions

    def emit_beacon(self, now: int) -> list[Action]:
        self.beacon_seq += 1
        targets: list[NodeId] = []
        if not self.is_owner():
            att = self.attachments.get(self.native_group)
            if att is not None and (att.anchor is not None or att.inflight):
                targets.append(self._go_of(self.native_group))
        if self.visited_group is not None:
            if self.anchors(self.visited_group):
                targets.append(self._go_of(self.visited_group))
            else:
                att = self.attachments.get(self.visited_group)
                if att is not None and att.anchor is not None:
                    targets.append(att.anchor)
        # Anchor neighbours track each other's liveness in both directions.
        targets.extend(self.neighbor_interest)
        actions: list[Action] = []
        for t in sorted(set(targets)):
            if t == self.id:
                continue
            actions.append(
                self._send(t, lambda s, d: Beacon(s, d, sender=self.id, seq=self.beacon_seq))
            )
        actions.append(SetTimer(T_BEACON, self.params.beacon_period_us))
        return actions

    def handle_beacon(self, msg: Beacon, now: int) -> list[Action]:
        if msg.sender in self.member_notes:
            self.liveness[msg.sender] = now
        if msg.sender in self.neighbor_interest:
            self.neighbor_liveness[msg.sender] = now
        return []

    def _forget_member(self, node: NodeId) -> None:
        self.member_notes.pop(node, None)
        self.liveness.pop(node, None)

    def _refresh_tracking(self) -> None:
        """Owner-side: only native members and the current anchor beacon the
        owner, so visiting secondaries must not be liveness-tracked."""
        for m in list(self.liveness):
            note = self.member_notes.get(m)
            if note == NOTE_VISITING_RELAY and m != self.go_anchor:
                del self.liveness[m]

    def detect_membership_change(self, now: int) -> list[Action]:
        actions: list[Action] = []
        timeout = self.params.beacon_timeout_us
        if self.is_owner():
            expired = sorted(
                m for m, last in self.liveness.items() if now - last > timeout and m != self.id
            )
            relay_lost = False
            for m in expired:
                note = self.member_notes.get(m, NOTE_PEER)
                self._forget_member(m)
                if m == self.go_anchor:
                    relay_lost = True
                elif note == NOTE_PEER:
                    actions += self._prune_member(m, now)
                else:
                    actions += self._prune_member(m, now)
            if relay_lost:
                actions += self._relay_failover(now)
        # Anchor-neighbour liveness (relays and anchors).
        stale = sorted(
            n for n, last in self.neighbor_liveness.items() if now - last > timeout
        )
        if stale:
            for n in stale:
                self.neighbor_interest.pop(n, None)
                self.neighbor_via.pop(n, None)
                self.neighbor_liveness.pop(n, None)
                self.advertised.pop(n, None)
            actions += self._recompute_and_distribute(now)
        actions.append(SetTimer(T_LIVENESS, self.params.beacon_period_us))
        return actions

    def _prune_member(self, node: NodeId, now: int) -> list[Action]:
        """Owner-side pruning of a silent member."""
        if self.go_anchor == self.id:
            changed = False
            if node in self.member_subs:
                del self.member_subs[node]
                self.member_group.pop(node, None)
                self.pushed.pop(node, None)
                changed = True
            return self._recompute_and_distribute(now) if changed else []
        return [
            self._send(
                self.go_anchor,
                lambda s, d: SubscriptionUpdate(s, d, subject=node, topics=None),
            )
        ]

    def handle_relay_loss(self, now: int) -> list[Action]:
        """Owner-side failover after the anchoring relay went silent."""
        return self._relay_failover(now)

    def _relay_failover(self, now: int) -> list[Action]:
        candidates = sorted(
            (note != NOTE_NATIVE_RELAY, m)
            for m, note in self.member_notes.items()
            if note in (NOTE_NATIVE_RELAY, NOTE_VISITING_RELAY)
        )
        actions: list[Action] = []
        if candidates:
            new_anchor = candidates[0][1]
            return self._handover_anchor(new_anchor, now)
        # No relay remains: revert to single-group owner-anchored operation.
        self.go_anchor = self.id
        self._refresh_tracking()
        att = self.attachments[self.native_group]
        att.anchor = self.id
        att.target = self.id
        att.inflight = False
        self.anchored_groups.add(self.native_group)
        self.member_subs = {self.id: self.local_topics}
        self.member_group = {self.id: self.native_group}
        self.pushed.clear()
        self.advertised.clear()
        for m in sorted(self.member_notes):
            actions.append(self._send(m, lambda s, d: JoinRedirect(s, d, target=self.id)))
        actions += self._recompute_and_distribute(now)
        return actions

    def handle_promote_to_relay(self, msg: PromoteToRelay, now: int) -> list[Action]:
        if self.is_owner():
            return [
                self._send(msg.src.node, lambda s, d: RelayAck(s, d, ok=False, reason="owner-cannot-relay"))
            ]
        if self.visited_group is not None:
            return [
                self._send(msg.src.node, lambda s, d: RelayAck(s, d, ok=False, reason="already-relay"))
            ]
        self.pending_creds = msg.credentials
        self.promoter = msg.src.node
        return [SetTimer(T_ATTACH, self.params.attach_delay_us)]

    def on_attach_result(self, ok: bool, endpoint: Optional[Endpoint], now: int) -> list[Action]:
        """Completion of the legacy association requested by a promotion."""
        promoter = self.promoter
        self.promoter = None
        creds = self.pending_creds
        self.pending_creds = None
        if not ok or endpoint is None or creds is None:
            if promoter is not None:
                return [
                    self._send(
                        promoter, lambda s, d: RelayAck(s, d, ok=False, reason="bad-credentials")
                    )
                ]
            return []
        self.visited_group = endpoint.group
        self.attachments[endpoint.group] = Attachment(endpoint.group)
        actions: list[Action] = []
        actions += self._become_anchor(self.native_group, now)
        if promoter is not None:
            actions.append(self._send(promoter, lambda s, d: RelayAck(s, d, ok=True)))
        actions += self.start_join(endpoint.group, now)
        return actions

    def handle_relay_ack(self, msg: RelayAck, now: int) -> list[Action]:
        if not self.is_owner() or msg.src.node != self.pending_promotion:
            return []
        peer = msg.src.node
        self.pending_promotion = None
        if not msg.ok:
            self.errors.append(f"promotion of {peer} failed: {msg.reason}")
            return []
        self.member_notes[peer] = NOTE_NATIVE_RELAY
        return self._handover_anchor(peer, now)

    def promote(self, target: NodeId, creds: CredentialBundle, now: int) -> list[Action]:
        """Owner-side start of a scripted relay promotion."""
        if not self.is_owner():
            self.errors.append("promote issued to a non-owner")
            return []
        if target == self.id or self.member_notes.get(target) != NOTE_PEER:
            self.errors.append(f"promotion rejected: {target} is not an ordinary member")
            return []
        if any(n == NOTE_NATIVE_RELAY for n in self.member_notes.values()):
            self.errors.append(f"promotion rejected: group {self.owns_group} already has a native relay")
            return []
        if self.pending_promotion is not None:
            self.errors.append("promotion rejected: another promotion is pending")
            return []
        self.pending_promotion = target
        return [self._send(target, lambda s, d: PromoteToRelay(s, d, credentials=creds))]

    # -- dispatch -------------------------------------------------------------

    def on_message(self, msg: Message, now: int) -> list[Action]:
        if isinstance(msg, Publication):
            return self.handle_publication(msg, now)
        if isinstance(msg, Beacon):
            return self.handle_beacon(msg, now)
        if isinstance(msg, JoinRequest):
            return self.handle_join_request(msg, now)
        if isinstance(msg, JoinRedirect):
            return self.handle_join_redirect(msg, now)
        if isinstance(msg, JoinAccept):
            return self.handle_join_accept(msg, now)
        if isinstance(msg, SubscriptionUpdate):
            return self.handle_subscription_update(msg, now)
        if isinstance(msg, RoutingPush):
            # Anchors compute their own tables; a stale push from a previous
            # anchor must not clobber them.
            if not self.anchored_groups:
                self.table = ForwardingTable(self.id, msg.entries)
            return []
        if isinstance(msg, PromoteToRelay):
            return self.handle_promote_to_relay(msg, now)
        if isinstance(msg, RelayAck):
            return self.handle_relay_ack(msg, now)
        raise TypeError(f"unhandled message {type(msg).__name__}")

    def on_timer(self, kind: str, payload: Optional[str], now: int) -> list[Action]:
        if kind == T_BEACON:
            return self.emit_beacon(now)
        if kind == T_LIVENESS:
            return self.detect_membership_change(now)
        if kind == T_JOIN_RETRY:
            assert payload is not None
            return self._join_retry(payload, now)
        raise ValueError(f"unhandled timer {kind}")
