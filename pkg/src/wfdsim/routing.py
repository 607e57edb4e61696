"""Subscription sets, forwarding tables, anchor-side recomputation and the
flood oracle used to cross-check protocol delivery."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .core import NodeId, TopicId

SUBSCRIBER_DIRECTED = "subscriber-directed"
ALL_ENDPOINTS = "all-endpoints"

EDGE_INTRA_P2P = "intra-group-p2p"
EDGE_INTER_LEGACY = "inter-group-legacy"


def subscribe(topics: frozenset[TopicId], topic: TopicId) -> frozenset[TopicId]:
    """Add ``topic`` to a local subscription set. Idempotent."""
    return topics | {topic}


def unsubscribe(topics: frozenset[TopicId], topic: TopicId) -> frozenset[TopicId]:
    """Remove ``topic`` from a local subscription set. Idempotent."""
    return topics - {topic}


Entries = dict[TopicId, tuple[NodeId, ...]]


@dataclass(frozen=True, slots=True)
class ForwardingTable:
    """Per-topic next-hop sets, held as sorted tuples for determinism.

    Topics without next hops carry no entry; a table never routes back to
    its owning node.
    """

    owner: NodeId
    entries: tuple[tuple[TopicId, tuple[NodeId, ...]], ...] = ()

    @staticmethod
    def build(owner: NodeId, entries: Mapping[TopicId, Iterable[NodeId]]) -> "ForwardingTable":
        canon = []
        for topic in sorted(entries):
            hops = tuple(sorted(set(entries[topic]) - {owner}))
            if hops:
                canon.append((topic, hops))
        return ForwardingTable(owner, tuple(canon))

    def next_hops(self, topic: TopicId) -> tuple[NodeId, ...]:
        for t, hops in self.entries:
            if t == topic:
                return hops
        return ()

    def as_dict(self) -> Entries:
        return {t: hops for t, hops in self.entries}


EMPTY_TABLE = ForwardingTable("")


@dataclass(frozen=True)
class AnchorView:
    """Global routing input: the backbone tree, who the relays are, and every
    member's local subscription set."""

    anchor: NodeId
    members: Mapping[NodeId, frozenset[TopicId]]
    edges: Mapping[tuple[NodeId, NodeId], str]  # canonical (min, max) -> edge label
    relays: frozenset[NodeId] = frozenset()

    def neighbors(self, node: NodeId) -> list[NodeId]:
        out = []
        for (a, b) in self.edges:
            if a == node:
                out.append(b)
            elif b == node:
                out.append(a)
        return sorted(out)


def make_edges(pairs: Iterable[tuple[NodeId, NodeId]], labels: Optional[Mapping[tuple[NodeId, NodeId], str]] = None) -> dict[tuple[NodeId, NodeId], str]:
    """Canonicalise an undirected edge list, defaulting labels to intra-group."""
    out: dict[tuple[NodeId, NodeId], str] = {}
    labels = labels or {}
    for a, b in pairs:
        key = (a, b) if a <= b else (b, a)
        out[key] = labels.get((a, b), labels.get((b, a), EDGE_INTRA_P2P))
    return out


def _check_tree(view: AnchorView) -> dict[NodeId, list[NodeId]]:
    nodes = sorted(view.members)
    if view.anchor not in view.members:
        raise ValueError(f"anchor {view.anchor} is not a vertex of the backbone")
    adj: dict[NodeId, list[NodeId]] = {n: [] for n in nodes}
    for (a, b) in view.edges:
        if a not in adj or b not in adj:
            raise ValueError(f"edge ({a}, {b}) names a node outside the view")
        adj[a].append(b)
        adj[b].append(a)
    for n in adj:
        adj[n].sort()
    if len(view.edges) != len(nodes) - 1:
        raise ValueError("backbone is not a tree: wrong edge count")
    seen = {view.anchor}
    stack = [view.anchor]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != len(nodes):
        raise ValueError("backbone is not a tree: disconnected")
    # Ordinary members hold a single upward entry, so they can only ever be
    # leaves; every interior vertex must be the anchor or a relay.
    routed = view.relays | {view.anchor}
    for n in nodes:
        if len(adj[n]) >= 2 and n not in routed:
            raise ValueError(f"interior backbone node {n} is neither anchor nor relay")
    return adj


def recompute_tables(
    view: AnchorView, anchor_fanout: str = SUBSCRIBER_DIRECTED
) -> dict[NodeId, ForwardingTable]:
    """Compute every node's forwarding table from a global view.

    Ordinary nodes point every live topic at their backbone neighbor toward
    the anchor. The anchor and relay nodes hold, per topic, exactly the
    neighbors whose subtree contains a subscriber. Topics nobody subscribes
    to appear nowhere.

    With ``anchor_fanout=ALL_ENDPOINTS`` each relay additionally fans every
    live topic out to its neighbors across the legacy attachment, matching
    the published two-group state rather than pure interest direction.
    """
    if anchor_fanout not in (SUBSCRIBER_DIRECTED, ALL_ENDPOINTS):
        raise ValueError(f"unknown anchor_fanout mode {anchor_fanout!r}")
    adj = _check_tree(view)

    live_topics = sorted({t for subs in view.members.values() for t in subs})
    routed = view.relays | {view.anchor}

    # Parent pointers toward the anchor, in one BFS pass.
    parent: dict[NodeId, NodeId] = {}
    order = [view.anchor]
    seen = {view.anchor}
    for u in order:
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                parent[v] = u
                order.append(v)

    # interest[(u, v)]: topics subscribed anywhere in v's subtree seen from u.
    interest: dict[tuple[NodeId, NodeId], frozenset[TopicId]] = {}

    def subtree_interest(u: NodeId, v: NodeId) -> frozenset[TopicId]:
        key = (u, v)
        got = interest.get(key)
        if got is None:
            acc = set(view.members[v])
            for w in adj[v]:
                if w != u:
                    acc |= subtree_interest(v, w)
            got = frozenset(acc)
            interest[key] = got
        return got

    tables: dict[NodeId, ForwardingTable] = {}
    for u in sorted(view.members):
        entries: dict[TopicId, list[NodeId]] = {}
        if u in routed:
            for v in adj[u]:
                behind = subtree_interest(u, v)
                for t in behind:
                    entries.setdefault(t, []).append(v)
            if anchor_fanout == ALL_ENDPOINTS and u in view.relays:
                legacy_side = [
                    v
                    for v in adj[u]
                    if view.edges.get((u, v) if u <= v else (v, u)) == EDGE_INTER_LEGACY
                ]
                for t in live_topics:
                    hops = entries.setdefault(t, [])
                    for v in legacy_side:
                        if v not in hops:
                            hops.append(v)
        else:
            up = parent.get(u)
            if up is not None:
                for t in live_topics:
                    entries[t] = [up]
        tables[u] = ForwardingTable.build(u, entries)
    return tables


def forward_decision(
    node: NodeId,
    local_topics: frozenset[TopicId],
    table: ForwardingTable,
    topic: TopicId,
    arrival: Optional[NodeId],
) -> tuple[bool, tuple[NodeId, ...]]:
    """One forwarding step: deliver locally iff subscribed, send to every
    table hop except the one the publication arrived from. Costs O(|hops|).
    """
    deliver = topic in local_topics
    hops = table.next_hops(topic)
    if arrival is not None and arrival in hops:
        hops = tuple(h for h in hops if h != arrival)
    return deliver, hops


def flood_oracle(
    edges: Iterable[tuple[NodeId, NodeId]],
    subscriptions: Mapping[NodeId, frozenset[TopicId]],
    origin: NodeId,
    topic: TopicId,
) -> frozenset[NodeId]:
    """Delivery set by exhaustive flooding with dedup; consults no tables.

    Returns exactly the nodes reachable from ``origin`` over the backbone
    that subscribe to ``topic``.
    """
    adj: dict[NodeId, list[NodeId]] = {n: [] for n in subscriptions}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    if origin not in adj:
        raise ValueError(f"origin {origin} not in topology")
    seen = {origin}
    stack = [origin]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return frozenset(n for n in seen if topic in subscriptions.get(n, frozenset()))
