import random

import pytest
from hypothesis import given, settings, strategies as st

from wfdsim.routing import (
    ALL_ENDPOINTS,
    AnchorView,
    EDGE_INTER_LEGACY,
    EDGE_INTRA_P2P,
    ForwardingTable,
    SUBSCRIBER_DIRECTED,
    flood_oracle,
    forward_decision,
    recompute_tables,
    subscribe,
    unsubscribe,
)

F = frozenset


# The illustrative two-group state: one relay bridging both groups, a single
# peer subscribed to both topics, star backbone centered on the relay.
def two_group_view():
    members = {
        "GO1": F(),
        "P11": F({"T1", "T2"}),
        "PR": F(),
        "GO2": F(),
        "P21": F(),
    }
    edges = {
        ("GO1", "PR"): EDGE_INTRA_P2P,
        ("P11", "PR"): EDGE_INTRA_P2P,
        ("GO2", "PR"): EDGE_INTER_LEGACY,
        ("P21", "PR"): EDGE_INTER_LEGACY,
    }
    return AnchorView(anchor="PR", members=members, edges=edges, relays=F({"PR"}))


class TestSubscriptionSet:
    def test_subscribe_adds(self):
        assert subscribe(F(), "T1") == {"T1"}

    def test_subscribe_idempotent(self):
        assert subscribe(F({"T1"}), "T1") == {"T1"}

    def test_subscribe_accumulates(self):
        assert subscribe(F({"T1"}), "T2") == {"T1", "T2"}

    def test_unsubscribe_removes(self):
        assert unsubscribe(F({"T1", "T2"}), "T2") == {"T1"}

    def test_unsubscribe_absent_is_noop(self):
        assert unsubscribe(F(), "T1") == F()

    def test_round_trip(self):
        assert subscribe(unsubscribe(F({"T1"}), "T1"), "T1") == {"T1"}

    @given(st.sets(st.sampled_from(["a", "b", "c", "d"])), st.sampled_from(["a", "b", "c", "d"]))
    def test_set_semantics(self, base, topic):
        base = F(base)
        assert topic in subscribe(base, topic)
        assert topic not in unsubscribe(base, topic)
        assert subscribe(subscribe(base, topic), topic) == subscribe(base, topic)


class TestRecompute:
    def test_two_group_subscriber_directed(self):
        tables = recompute_tables(two_group_view())
        assert tables["GO1"].next_hops("T2") == ("PR",)
        assert tables["P11"].next_hops("T2") == ("PR",)
        assert tables["GO2"].next_hops("T2") == ("PR",)
        assert tables["P21"].next_hops("T2") == ("PR",)
        assert tables["PR"].next_hops("T1") == ("P11",)
        assert tables["PR"].next_hops("T2") == ("P11",)

    def test_two_group_all_endpoints_fanout(self):
        tables = recompute_tables(two_group_view(), ALL_ENDPOINTS)
        # The relay additionally fans out across its legacy attachment.
        assert tables["PR"].next_hops("T2") == ("GO2", "P11", "P21")
        assert tables["GO1"].next_hops("T2") == ("PR",)
        assert tables["GO2"].next_hops("T2") == ("PR",)
        assert tables["P21"].next_hops("T2") == ("PR",)

    def test_no_subscribers_no_entries(self):
        view = AnchorView(
            anchor="GO1",
            members={"GO1": F(), "P11": F()},
            edges={("GO1", "P11"): EDGE_INTRA_P2P},
        )
        tables = recompute_tables(view)
        assert all(t.entries == () for t in tables.values())

    def test_rejects_non_tree(self):
        view = AnchorView(
            anchor="a",
            members={"a": F(), "b": F(), "c": F()},
            edges={("a", "b"): EDGE_INTRA_P2P, ("b", "c"): EDGE_INTRA_P2P, ("a", "c"): EDGE_INTRA_P2P},
        )
        with pytest.raises(ValueError):
            recompute_tables(view)

    def test_rejects_disconnected(self):
        view = AnchorView(
            anchor="a",
            members={"a": F(), "b": F(), "c": F(), "d": F()},
            edges={("a", "b"): EDGE_INTRA_P2P, ("c", "d"): EDGE_INTRA_P2P},
        )
        with pytest.raises(ValueError):
            recompute_tables(view)

    def test_idempotent(self):
        view = two_group_view()
        assert recompute_tables(view) == recompute_tables(view)

    def test_unsubscribe_isolation(self):
        # Dropping one member's topic never touches other topics' entries.
        view = two_group_view()
        before = recompute_tables(view)
        smaller = dict(view.members)
        smaller["P11"] = F({"T1"})
        after = recompute_tables(
            AnchorView(anchor=view.anchor, members=smaller, edges=view.edges, relays=view.relays)
        )
        for node in before:
            assert after[node].next_hops("T1") == before[node].next_hops("T1")


def random_tree_view(rng: random.Random, n: int, topics: int):
    """Random backbone tree; interior vertices are relays, as in real views."""
    names = [f"n{i}" for i in range(n)]
    edges = {}
    degree = {name: 0 for name in names}
    for i in range(1, n):
        parent = names[rng.randrange(i)]
        key = tuple(sorted((names[i], parent)))
        edges[key] = EDGE_INTRA_P2P
        degree[names[i]] += 1
        degree[parent] += 1
    members = {
        name: F({f"t{k}" for k in range(topics) if rng.random() < 0.4}) for name in names
    }
    anchor = rng.choice(names)
    relays = F({name for name, d in degree.items() if d >= 2} | {anchor})
    return AnchorView(anchor=anchor, members=members, edges=edges, relays=relays)


def walk_tables(view, tables, origin, topic):
    """Drive forward_decision with dedup; return (delivered set, sends)."""
    delivered = []
    sends = 0
    seen = {origin}
    deliver, hops = forward_decision(origin, view.members[origin], tables[origin], topic, None)
    if deliver:
        delivered.append(origin)
    frontier = [(origin, h) for h in hops]
    while frontier:
        sender, node = frontier.pop(0)
        sends += 1
        if node in seen:
            continue
        seen.add(node)
        deliver, hops = forward_decision(node, view.members[node], tables[node], topic, sender)
        if deliver:
            delivered.append(node)
        frontier.extend((node, h) for h in hops)
    return delivered, sends


class TestOracle:
    def test_two_group_publish_reaches_only_subscriber(self):
        view = two_group_view()
        got = flood_oracle(view.edges, view.members, "GO2", "T2")
        assert got == {"P11"}

    def test_unsubscribed_topic_reaches_nobody(self):
        view = two_group_view()
        assert flood_oracle(view.edges, view.members, "P11", "T9") == F()

    def test_unknown_origin_rejected(self):
        view = two_group_view()
        with pytest.raises(ValueError):
            flood_oracle(view.edges, view.members, "nope", "T1")

    def test_random_trees_route_like_the_flood(self):
        rng = random.Random(20260809)
        for _ in range(300):
            view = random_tree_view(rng, rng.randint(2, 8), rng.randint(1, 5))
            tables = recompute_tables(view)
            origin = rng.choice(sorted(view.members))
            topic = f"t{rng.randrange(5)}"
            want = flood_oracle(view.edges, view.members, origin, topic)
            delivered, sends = walk_tables(view, tables, origin, topic)
            assert set(delivered) == want
            assert len(delivered) == len(set(delivered))  # exactly once
            assert sends <= len(view.edges)

    def test_fanout_mode_delivers_identically(self):
        rng = random.Random(42)
        for _ in range(100):
            view = random_tree_view(rng, rng.randint(2, 8), 3)
            tables = recompute_tables(view, ALL_ENDPOINTS)
            origin = rng.choice(sorted(view.members))
            want = flood_oracle(view.edges, view.members, origin, "t0")
            delivered, _ = walk_tables(view, tables, origin, "t0")
            assert set(delivered) == want

    def test_peer_entries_are_singleton_anchor_pointers(self):
        rng = random.Random(7)
        for _ in range(50):
            view = random_tree_view(rng, rng.randint(3, 8), 3)
            tables = recompute_tables(view)
            for node in view.members:
                if node == view.anchor or node in view.relays:
                    continue
                for _, hops in tables[node].entries:
                    assert len(hops) == 1


class TestForwardDecision:
    def test_relay_forwards_toward_subscriber(self):
        tables = recompute_tables(two_group_view())
        deliver, send = forward_decision("PR", F(), tables["PR"], "T1", "GO2")
        assert (deliver, send) == (False, ("P11",))

    def test_arrival_exclusion_stops_echo(self):
        tables = recompute_tables(two_group_view())
        deliver, send = forward_decision("P11", F({"T1", "T2"}), tables["P11"], "T2", "PR")
        assert (deliver, send) == (True, ())

    def test_unsubscribed_topic_with_empty_table_dies(self):
        table = ForwardingTable("pub")
        assert forward_decision("pub", F(), table, "T1", None) == (False, ())


class TestForwardingTable:
    def test_build_drops_owner_and_empty_entries(self):
        t = ForwardingTable.build("me", {"a": ["me", "x"], "b": ["me"]})
        assert t.as_dict() == {"a": ("x",)}

    def test_entries_are_sorted(self):
        t = ForwardingTable.build("me", {"b": ["z", "y"], "a": ["x"]})
        assert t.entries == (("a", ("x",)), ("b", ("y", "z")))
