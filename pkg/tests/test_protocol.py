import random

import pytest

from conftest import quiesced_world, random_spec
from wfdsim.core import (
    Beacon,
    CredentialBundle,
    InterfaceKind,
    JoinRedirect,
    JoinRequest,
    Publication,
    PublicationId,
    Role,
)
from wfdsim.netsim import SimConfig
from wfdsim.protocol import DeliverLocal, ScopeError, Send
from wfdsim.routing import ALL_ENDPOINTS
from wfdsim.scenarios import (
    GroupSpec,
    RelaySpec,
    ScenarioSpec,
    TRAFFIC_START_US,
    bootstrap_script,
    build_world,
    builtin_scenarios,
    ground_truth_tables,
    verify_bootstrap,
)

F = frozenset


def two_group_fixture_spec() -> ScenarioSpec:
    """Two groups bridged by one relay; the first group's peer subscribes to
    both topics. This is the promoted-relay state used across the suite."""
    return ScenarioSpec(
        name="two-group-fixture",
        groups=(
            GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11", "R1")),
            GroupSpec("g2", "net-g2", "pass-g2", "GO2", ("P21",)),
        ),
        relays=(RelaySpec("R1", "g1", "g2"),),
        subscriptions=(("P11", ("T1", "T2")),),
        source="GO2",
        sink="P11",
        topic="T2",
    )


def pr_sr_spec() -> ScenarioSpec:
    return ScenarioSpec(
        name="pr-sr",
        groups=(
            GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11", "R1")),
            GroupSpec("g2", "net-g2", "pass-g2", "GO2", ("P21", "R2")),
        ),
        relays=(RelaySpec("R1", "g1", "g2"), RelaySpec("R2", "g2", "g1")),
        subscriptions=(("P21", ("data",)),),
        source="P11",
        sink="P21",
        topic="data",
    )


class TestJoin:
    def test_first_peer_joins_lone_owner(self, cfg):
        spec = builtin_scenarios()["2d1g"]
        world = quiesced_world(spec, cfg)
        go, peer = world.nodes["GO1"], world.nodes["P11"]
        assert peer.attachments["g1"].anchor == "GO1"
        assert "P11" in go.member_subs
        # The owner subscribes the flow topic, so publications at the peer
        # route toward the owner.
        assert peer.table.next_hops("data") == ("GO1",)

    def test_join_is_redirected_when_relay_anchors(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        # A fresh join request to the owner is answered with a redirect.
        go = world.nodes["GO1"]
        peer_ep = world.directory.endpoint("P11", "g1")
        go_ep = world.directory.endpoint("GO1", "g1")
        req = JoinRequest(
            peer_ep, go_ep, node="P11", addr=peer_ep.addr, ssid="net-g1", subscriptions=F()
        )
        actions = go.handle_join_request(req, world.now)
        redirects = [a for a in actions if isinstance(a, Send) and isinstance(a.message, JoinRedirect)]
        assert len(redirects) == 1
        assert redirects[0].message.target == "R1"

    def test_join_with_wrong_ssid_changes_nothing(self, cfg):
        spec = builtin_scenarios()["2d1g"]
        world = quiesced_world(spec, cfg)
        go = world.nodes["GO1"]
        before = dict(go.member_subs)
        peer_ep = world.directory.endpoint("P11", "g1")
        go_ep = world.directory.endpoint("GO1", "g1")
        req = JoinRequest(
            peer_ep, go_ep, node="P11", addr=peer_ep.addr, ssid="wrong", subscriptions=F({"x"})
        )
        actions = go.handle_join_request(req, world.now)
        assert go.member_subs == before
        assert all(not isinstance(a, Send) or not isinstance(a.message, JoinRedirect) for a in actions)

    def test_duplicate_redirect_is_idempotent(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        peer = world.nodes["P21"]
        go2_ep = world.directory.endpoint("GO2", "g2")
        peer_ep = world.directory.endpoint("P21", "g2")
        redirect = JoinRedirect(go2_ep, peer_ep, target="R1")
        first = peer.handle_join_redirect(redirect, world.now)
        assert any(isinstance(a, Send) and isinstance(a.message, JoinRequest) for a in first)
        second = peer.handle_join_redirect(redirect, world.now)
        assert second == []

    def test_redirect_to_dead_relay_falls_back_to_owner(self, cfg):
        spec = two_group_fixture_spec()
        world = build_world(spec, cfg=cfg, seed=0)
        # Everyone except P11 bootstraps; then the relay dies and P11 joins.
        world.at(100_000, ("join", "R1"))
        world.at(150_000, ("join", "P21"))
        creds = world.promote_credentials("g2")
        world.at(1_000_000, ("promote", "GO1", "R1", creds))
        world.run_until(2_500_000)
        world.at(2_500_000, ("kill", "R1"))
        world.at(2_600_000, ("join", "P11"))
        world.run_until(12_000_000)
        peer = world.nodes["P11"]
        assert peer.attachments["g1"].anchor == "GO1"
        assert "P11" in world.nodes["GO1"].member_subs


class TestSubscriptionUpdates:
    def test_update_pushes_reach_fixture_nodes(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        tables = world.node_tables()
        assert tables["GO1"]["T2"] == ("R1",)
        assert tables["P11"]["T2"] == ("R1",)
        assert tables["GO2"]["T2"] == ("R1",)
        assert tables["P21"]["T2"] == ("R1",)
        assert tables["R1"]["T1"] == ("P11",)
        assert tables["R1"]["T2"] == ("P11",)

    def test_unsubscribe_of_absent_topic_pushes_nothing(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        anchor = world.nodes["R1"]
        pushed_before = dict(anchor.pushed)
        actions = world.nodes["P21"].unsubscribe("T9", world.now)
        assert actions == []
        assert anchor.pushed == pushed_before

    def test_unsubscribe_all_topics_empties_network_tables(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        world.at(world.now, ("unsubscribe", "P11", "T1"))
        world.at(world.now, ("unsubscribe", "P11", "T2"))
        world.run_until(world.now + 1_000_000)
        assert all(t == {} for t in world.node_tables().values())

    def test_random_updates_converge_to_scratch_recompute(self, cfg):
        rng = random.Random(11)
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        nodes = spec.all_nodes()
        t = world.now
        for _ in range(25):
            t += 50_000
            op = rng.choice(("subscribe", "unsubscribe"))
            world.at(t, (op, rng.choice(nodes), rng.choice(["T1", "T2", "T3"])))
        world.run_until(t + 2_000_000)
        want = ground_truth_tables(spec, subscriptions=world.node_subscriptions())
        got = world.node_tables()
        assert got == {n: tab.as_dict() for n, tab in want.items()}


class TestPublicationHandling:
    def test_publish_routes_on_native_interface(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        actions = world.nodes["P11"].publish("T2", 100, world.now)
        sends = [a for a in actions if isinstance(a, Send)]
        local = [a for a in actions if isinstance(a, DeliverLocal)]
        assert len(sends) == 1 and len(local) == 1
        assert sends[0].message.dst.node == "R1"
        assert sends[0].via is InterfaceKind.P2P_NATIVE

    def test_publish_without_subscribers_dies_at_origin(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        actions = world.nodes["P21"].publish("T9", 100, world.now)
        assert actions == []

    def test_relay_forwards_cross_group_without_local_delivery(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        relay = world.nodes["R1"]
        src = world.directory.endpoint("GO2", "g2")
        dst = world.directory.endpoint("R1", "g2")
        pub = Publication(src, dst, pub_id=PublicationId("GO2", 1), topic="T2", payload_bytes=64, hops=1)
        actions = relay.handle_publication(pub, world.now)
        sends = [a for a in actions if isinstance(a, Send)]
        assert [s.message.dst.node for s in sends] == ["P11"]
        assert sends[0].via is InterfaceKind.P2P_NATIVE
        assert not any(isinstance(a, DeliverLocal) for a in actions)

    def test_duplicate_publication_is_dropped_silently(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        relay = world.nodes["R1"]
        src = world.directory.endpoint("GO2", "g2")
        dst = world.directory.endpoint("R1", "g2")
        pub = Publication(src, dst, pub_id=PublicationId("GO2", 7), topic="T2", payload_bytes=64, hops=1)
        assert relay.handle_publication(pub, world.now) != []
        assert relay.handle_publication(pub, world.now) == []

    def test_three_group_chain_uses_three_transmissions(self, cfg):
        spec = builtin_scenarios()["5d3g"]
        world = quiesced_world(spec, cfg, trace=True)
        world.at(world.now, ("publish", "P11", "data", 777))
        world.run_until(world.now + 500_000)
        sends = [l for l in world.trace_lines if l.split()[1] == "SND" and l.endswith(" 817")]
        deliveries = [(n, t) for (_, n, t) in world.local_deliveries if t == "data"]
        assert len(sends) == 3
        assert deliveries == [("GO3", "data")]


class TestBeaconsAndLiveness:
    def test_beacon_updates_liveness(self, cfg):
        spec = builtin_scenarios()["2d1g"]
        world = quiesced_world(spec, cfg)
        go = world.nodes["GO1"]
        src = world.directory.endpoint("P11", "g1")
        dst = world.directory.endpoint("GO1", "g1")
        go.handle_beacon(Beacon(src, dst, sender="P11", seq=9), 5_000_000)
        assert go.liveness["P11"] == 5_000_000

    def test_beacon_from_unknown_node_is_ignored(self, cfg):
        spec = builtin_scenarios()["2d1g"]
        world = quiesced_world(spec, cfg)
        go = world.nodes["GO1"]
        src = world.directory.endpoint("P11", "g1")
        dst = world.directory.endpoint("GO1", "g1")
        go.handle_beacon(Beacon(src, dst, sender="ghost", seq=1), 5_000_000)
        assert "ghost" not in go.liveness

    def test_steady_beacons_cause_no_membership_change(self, cfg):
        spec = builtin_scenarios()["3d1g"]
        world = quiesced_world(spec, cfg)
        members_before = dict(world.nodes["GO1"].member_subs)
        world.run_until(world.now + 8_000_000)
        assert world.nodes["GO1"].member_subs == members_before

    def test_silenced_peer_detected_after_timeout(self, cfg):
        spec = builtin_scenarios()["3d1g"]
        world = quiesced_world(spec, cfg)
        world.at(10_000_000, ("kill", "P12"))
        world.run_until(12_900_000)
        assert "P12" in world.nodes["GO1"].member_notes
        world.run_until(14_100_000)
        assert "P12" not in world.nodes["GO1"].member_notes
        want = ground_truth_tables(
            spec, subscriptions=world.node_subscriptions(), dead=F({"P12"})
        )
        assert world.node_tables() == {n: t.as_dict() for n, t in want.items()}

    def test_two_peers_lost_in_same_tick_prune_together(self, cfg):
        spec = ScenarioSpec(
            name="wide",
            groups=(GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11", "P12", "P13")),),
            relays=(),
            subscriptions=(("P11", ("a",)), ("P12", ("a",)), ("P13", ("a",))),
            source="P11",
            sink="P12",
            topic="a",
        )
        world = quiesced_world(spec, cfg)
        world.at(10_000_000, ("kill", "P12"))
        world.at(10_000_000, ("kill", "P13"))
        world.run_until(15_000_000)
        want = ground_truth_tables(
            spec, subscriptions=world.node_subscriptions(), dead=F({"P12", "P13"})
        )
        assert world.node_tables() == {n: t.as_dict() for n, t in want.items()}


class TestRelayLoss:
    def test_sole_relay_loss_falls_back_to_owner_anchoring(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        world.at(4_000_000, ("kill", "R1"))
        world.run_until(9_000_000)
        assert world.nodes["GO1"].go_anchor == "GO1"
        assert world.nodes["GO2"].go_anchor == "GO2"
        want = ground_truth_tables(spec, subscriptions=world.node_subscriptions(), dead=F({"R1"}))
        assert world.node_tables() == {n: t.as_dict() for n, t in want.items()}

    def test_intra_group_delivery_survives_relay_loss(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        world.at(4_000_000, ("kill", "R1"))
        world.run_until(9_000_000)
        world.at(world.now, ("publish", "GO1", "T1", 200))
        world.run_until(world.now + 500_000)
        assert ("P11", "T1") in {(n, t) for (_, n, t) in world.local_deliveries}

    def test_remaining_relay_is_promoted(self, cfg):
        spec = pr_sr_spec()
        world = quiesced_world(spec, cfg)
        world.at(4_000_000, ("kill", "R1"))
        world.run_until(10_000_000)
        r2 = world.nodes["R2"]
        assert world.nodes["GO1"].go_anchor == "R2"
        assert sorted(r2.anchored_groups) == ["g1", "g2"]
        assert r2.role is Role.PRIMARY_RELAY
        want = ground_truth_tables(spec, subscriptions=world.node_subscriptions(), dead=F({"R1"}))
        assert world.node_tables() == {n: t.as_dict() for n, t in want.items()}

    def test_publications_queued_at_dead_relay_count_as_loss(self, cfg):
        spec = builtin_scenarios()["4d2g"]
        world = quiesced_world(spec, cfg)
        payload = cfg.payload_bytes
        gap = payload * 8 * 1_000_000 // 20_000_000
        t = world.now
        for _ in range(400):
            world.at(t, ("publish", "P11", "data", payload))
            t += gap
        world.at(world.now + 100_000, ("kill", "R1"))
        world.run_until(t + 500_000)
        c = world.collect(t - TRAFFIC_START_US)
        assert c.dead_node_losses > 0
        assert c.packets_sent == (
            c.packets_delivered + c.queue_drops + c.dead_node_losses + c.in_flight_at_end
        )


class TestPromotion:
    def test_two_group_bootstrap_promotes_relay_to_anchor(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        relay = world.nodes["R1"]
        assert relay.role is Role.PRIMARY_RELAY
        assert sorted(relay.anchored_groups) == ["g1", "g2"]
        assert world.nodes["GO1"].go_anchor == "R1"
        assert world.nodes["GO2"].go_anchor == "R1"
        assert world.directory.endpoint("R1", "g2") is not None

    def test_promoting_the_owner_is_rejected(self, cfg):
        spec = builtin_scenarios()["4d2g"]
        world = build_world(spec, cfg=cfg, seed=0)
        bootstrap_script(spec, world)
        creds = world.promote_credentials("g2")
        world.at(2_600_000, ("promote", "GO1", "GO1", creds))
        world.run_until(4_000_000)
        go = world.nodes["GO1"]
        assert any("not an ordinary member" in e for e in go.errors)
        assert world.directory.endpoint("GO1", "g2") is None

    def test_wrong_passphrase_attaches_nothing(self, cfg):
        spec = builtin_scenarios()["2d1g"]
        world = quiesced_world(spec, cfg)
        bad = CredentialBundle(group="g1", ssid="net-g1", passphrase="nope")
        world.at(world.now, ("promote", "GO1", "P11", bad))
        world.run_until(world.now + 2_000_000)
        assert world.directory.endpoint("P11", "g1").iface is InterfaceKind.P2P_NATIVE
        peer = world.nodes["P11"]
        assert peer.role is Role.ORDINARY_PEER
        assert peer.visited_group is None
        assert any("promotion of P11 failed" in e for e in world.nodes["GO1"].errors)

    def test_second_native_relay_is_rejected(self, cfg):
        spec = two_group_fixture_spec()
        world = quiesced_world(spec, cfg)
        creds = world.promote_credentials("g2")
        world.at(world.now, ("promote", "GO1", "P11", creds))
        world.run_until(world.now + 2_000_000)
        assert any("already has a native relay" in e for e in world.nodes["GO1"].errors)
        assert world.nodes["P11"].visited_group is None


class TestScopeRule:
    def test_secondary_relay_cannot_address_plain_visited_member(self, cfg):
        spec = builtin_scenarios()["5d3g"]
        world = quiesced_world(spec, cfg)
        r1 = world.nodes["R1"]  # secondary within g2, anchored by R2
        assert not r1.anchors("g2")
        with pytest.raises(ScopeError):
            r1._send_in_group("g2", "GO2", lambda s, d: Beacon(s, d, sender="R1", seq=1))

    def test_secondary_relay_may_address_the_visited_anchor(self, cfg):
        spec = builtin_scenarios()["5d3g"]
        world = quiesced_world(spec, cfg)
        r1 = world.nodes["R1"]
        send = r1._send_in_group("g2", "R2", lambda s, d: Beacon(s, d, sender="R1", seq=1))
        assert send.message.dst.node == "R2"


class TestQuiescentConvergence:
    def test_random_worlds_converge_to_ground_truth(self, cfg):
        rng = random.Random(20260808)
        for i in range(20):
            spec = random_spec(rng, name=f"conv{i}")
            world = quiesced_world(spec, cfg, seed=i)
            want = ground_truth_tables(spec, subscriptions=world.node_subscriptions())
            got = world.node_tables()
            assert got == {n: t.as_dict() for n, t in want.items()}, spec
