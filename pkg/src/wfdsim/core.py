"""Identities, roles, addresses, credentials and the protocol message vocabulary.

Everything here is an immutable value type shared by the routing, protocol and
simulation layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional

NodeId = str
GroupId = str
TopicId = str

# Every group owner exposes this address on its P2P interface (models the
# fixed 192.168.49.1 that all owners share, which is why an owner address is
# never usable as a global key).
DEFAULT_GO_ADDR = 1

# First address handed out to ordinary P2P clients / legacy clients of a group.
FIRST_PEER_ADDR = 2
FIRST_LEGACY_ADDR = 100

HEADER_BYTES = 40
CONTROL_BODY_BYTES = 24


class Role(Enum):
    GROUP_OWNER = "group-owner"
    ORDINARY_PEER = "ordinary-peer"
    PRIMARY_RELAY = "primary-relay"
    SECONDARY_RELAY = "secondary-relay"


class InterfaceKind(Enum):
    P2P_NATIVE = "p2p"
    LEGACY_CLIENT = "legacy"


RELAY_ROLES = (Role.PRIMARY_RELAY, Role.SECONDARY_RELAY)


@dataclass(frozen=True, slots=True)
class Endpoint:
    """A (node, interface, group, address) attachment point.

    Addresses are unique only within one (group, interface-domain); owner
    addresses collide across groups by construction.
    """

    node: NodeId
    iface: InterfaceKind
    group: GroupId
    addr: int


@dataclass(frozen=True, slots=True)
class CredentialBundle:
    """Out-of-band join material for attaching to a group as a legacy client."""

    group: GroupId
    ssid: str
    passphrase: str


@dataclass(frozen=True, slots=True)
class PublicationId:
    """Globally unique publication identity: origin node plus origin counter."""

    origin: NodeId
    seq: int


@dataclass(frozen=True, slots=True)
class Message:
    """Base class for the closed set of protocol messages."""

    src: Endpoint
    dst: Endpoint

    @property
    def size_bytes(self) -> int:
        return HEADER_BYTES + CONTROL_BODY_BYTES


@dataclass(frozen=True, slots=True)
class JoinRequest(Message):
    """Sent by a joining node to the group owner (or, after a redirect, to
    the group's forwarding anchor). ``subscriptions`` carries the joiner's
    full local set; for a relay attachment it carries the aggregated topic
    interest of everything behind the relay."""

    node: NodeId
    addr: int
    ssid: str
    subscriptions: frozenset[TopicId]
    is_relay: bool = False


@dataclass(frozen=True, slots=True)
class JoinRedirect(Message):
    """Instructs the receiver to re-anchor at ``target`` and rejoin there."""

    target: NodeId


@dataclass(frozen=True, slots=True)
class JoinAccept(Message):
    """Anchor's acknowledgement; carries the joiner's forwarding entries."""

    anchor: NodeId
    entries: tuple[tuple[TopicId, tuple[NodeId, ...]], ...]


@dataclass(frozen=True, slots=True)
class SubscriptionUpdate(Message):
    """Full-set subscription report about ``subject``.

    ``topics`` is the subject's complete current interest set; ``None`` means
    the subject has left the network (pruning notice). Anchors also use this
    message to advertise the aggregated interest behind themselves to
    neighbouring anchors.
    """

    subject: NodeId
    topics: Optional[frozenset[TopicId]]


@dataclass(frozen=True, slots=True)
class RoutingPush(Message):
    """Full replacement of the receiver's forwarding entries."""

    entries: tuple[tuple[TopicId, tuple[NodeId, ...]], ...]


@dataclass(frozen=True, slots=True)
class Publication(Message):
    """Application payload; size-only, no content bytes."""

    pub_id: PublicationId
    topic: TopicId
    payload_bytes: int
    hops: int = 0

    @property
    def size_bytes(self) -> int:
        return HEADER_BYTES + self.payload_bytes


@dataclass(frozen=True, slots=True)
class Beacon(Message):
    sender: NodeId
    seq: int


@dataclass(frozen=True, slots=True)
class PromoteToRelay(Message):
    credentials: CredentialBundle


@dataclass(frozen=True, slots=True)
class RelayAck(Message):
    """Acknowledgement for promotion attempts; doubles as a protocol NACK."""

    ok: bool
    reason: str = ""


@dataclass(frozen=True, slots=True)
class Violation:
    """One structural rule broken by a candidate topology."""

    kind: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


def validate_topology(
    nodes: Mapping[NodeId, Role],
    groups: Mapping[GroupId, NodeId],
    endpoints: Iterable[Endpoint],
) -> list[Violation]:
    """Check a static topology against the structural rules.

    Violations are data, not failures: the full list is always returned.
    ``groups`` maps each group to its declared owner.
    """
    endpoints = list(endpoints)
    violations: list[Violation] = []

    by_node: dict[NodeId, list[Endpoint]] = {n: [] for n in nodes}
    for ep in endpoints:
        if ep.node not in nodes:
            violations.append(Violation("unknown node", f"endpoint {ep} names undeclared node"))
            continue
        by_node[ep.node].append(ep)

    # Endpoint cardinality: exactly one P2P endpoint, at most one legacy.
    for node, eps in sorted(by_node.items()):
        p2p = [e for e in eps if e.iface is InterfaceKind.P2P_NATIVE]
        legacy = [e for e in eps if e.iface is InterfaceKind.LEGACY_CLIENT]
        if len(p2p) != 1:
            violations.append(
                Violation("p2p endpoint count", f"node {node} has {len(p2p)} P2P endpoints, expected 1")
            )
        if len(legacy) > 1:
            violations.append(
                Violation("legacy endpoint count", f"node {node} has {len(legacy)} legacy endpoints, expected <= 1")
            )
        role = nodes[node]
        if role is Role.GROUP_OWNER and legacy:
            violations.append(
                Violation("GO acting as legacy client", f"group owner {node} holds a legacy endpoint")
            )
        if role in RELAY_ROLES and not legacy:
            violations.append(
                Violation("relay without legacy endpoint", f"relay {node} holds no legacy endpoint")
            )
        if role not in RELAY_ROLES and role is not Role.GROUP_OWNER and legacy:
            violations.append(
                Violation("legacy endpoint on non-relay", f"ordinary peer {node} holds a legacy endpoint")
            )

    # Group ownership: declared owner must be a GROUP_OWNER whose P2P endpoint
    # lives in the group, and it must be the only one there.
    p2p_home: dict[NodeId, GroupId] = {}
    for ep in endpoints:
        if ep.iface is InterfaceKind.P2P_NATIVE and ep.node in nodes:
            p2p_home.setdefault(ep.node, ep.group)

    for gid, owner in sorted(groups.items()):
        if owner not in nodes:
            violations.append(Violation("unknown owner", f"group {gid} owner {owner} not declared"))
            continue
        if nodes[owner] is not Role.GROUP_OWNER:
            violations.append(
                Violation("owner role", f"group {gid} owner {owner} has role {nodes[owner].value}")
            )
        if p2p_home.get(owner) != gid:
            violations.append(
                Violation("owner placement", f"group {gid} owner {owner} has no P2P endpoint in the group")
            )
        owners_here = sorted(
            n for n, r in nodes.items() if r is Role.GROUP_OWNER and p2p_home.get(n) == gid
        )
        if len(owners_here) > 1:
            violations.append(
                Violation("multiple GOs", f"group {gid} hosts group owners {owners_here}")
            )

    for node, role in sorted(nodes.items()):
        if role is Role.GROUP_OWNER and node not in groups.values():
            violations.append(Violation("orphan owner", f"{node} has owner role but owns no group"))

    # Addressing: owners carry DEFAULT_GO_ADDR; addresses unique per
    # (group, interface-domain).
    for ep in endpoints:
        if ep.node not in nodes:
            continue
        is_owner_ep = (
            nodes[ep.node] is Role.GROUP_OWNER
            and ep.iface is InterfaceKind.P2P_NATIVE
            and groups.get(ep.group) == ep.node
        )
        if is_owner_ep and ep.addr != DEFAULT_GO_ADDR:
            violations.append(
                Violation("owner address", f"owner {ep.node} P2P addr {ep.addr} != {DEFAULT_GO_ADDR}")
            )
        if not is_owner_ep and ep.iface is InterfaceKind.P2P_NATIVE and ep.addr == DEFAULT_GO_ADDR:
            violations.append(
                Violation("address collision", f"non-owner {ep.node} uses the owner address in {ep.group}")
            )

    seen_addr: dict[tuple[GroupId, InterfaceKind, int], NodeId] = {}
    for ep in endpoints:
        key = (ep.group, ep.iface, ep.addr)
        if key in seen_addr and seen_addr[key] != ep.node:
            violations.append(
                Violation(
                    "address collision",
                    f"{ep.node} and {seen_addr[key]} share addr {ep.addr} in ({ep.group}, {ep.iface.value})",
                )
            )
        seen_addr.setdefault(key, ep.node)

    # Relay placement: for each group, at most one native relay, and a group
    # containing several relays must contain a native one (the rule assigning
    # the primary is otherwise undefined).
    legacy_home: dict[NodeId, GroupId] = {
        ep.node: ep.group
        for ep in endpoints
        if ep.iface is InterfaceKind.LEGACY_CLIENT and ep.node in nodes
    }
    relays = sorted(n for n, r in nodes.items() if r in RELAY_ROLES)
    group_ids = sorted(groups)
    for gid in group_ids:
        native = [r for r in relays if p2p_home.get(r) == gid]
        visiting = [r for r in relays if legacy_home.get(r) == gid]
        if len(native) > 1:
            violations.append(
                Violation("multiple native relays", f"group {gid} has native relays {native}")
            )
        if len(native) + len(visiting) >= 2 and not native:
            violations.append(
                Violation("no native relay", f"group {gid} hosts only visiting relays {visiting}")
            )

    # Relay attachments must leave the group graph a forest; parallel bridges
    # between one pair of groups collapse to a single backbone edge.
    parent: dict[GroupId, GroupId] = {g: g for g in group_ids}

    def find(g: GroupId) -> GroupId:
        while parent[g] != g:
            parent[g] = parent[parent[g]]
            g = parent[g]
        return g

    pair_edges = set()
    for r in relays:
        home, away = p2p_home.get(r), legacy_home.get(r)
        if home is None or away is None or home not in parent or away not in parent:
            continue
        if home == away:
            violations.append(Violation("self bridge", f"relay {r} bridges {home} to itself"))
            continue
        pair_edges.add(tuple(sorted((home, away))))
    for a, b in sorted(pair_edges):
        ra, rb = find(a), find(b)
        if ra == rb:
            violations.append(Violation("relay cycle", f"bridge {a}-{b} closes a cycle of groups"))
        else:
            parent[ra] = rb

    return violations
