"""Declarative scenarios, bootstrap scripting, load sweeps and CSV emission."""

from __future__ import annotations

import concurrent.futures
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from . import routing
from .core import (
    DEFAULT_GO_ADDR,
    Endpoint,
    FIRST_LEGACY_ADDR,
    FIRST_PEER_ADDR,
    GroupId,
    InterfaceKind,
    NodeId,
    Role,
    TopicId,
    Violation,
    validate_topology,
)
from .netsim import NetGroup, SimConfig, World, generate_traffic, TrafficGenerator, mean
from .routing import AnchorView, EDGE_INTER_LEGACY, EDGE_INTRA_P2P, recompute_tables

TRAFFIC_START_US = 3_000_000
JOIN_START_US = 100_000
JOIN_STEP_US = 50_000
SUBSCRIBE_START_US = 900_000
SUBSCRIBE_STEP_US = 20_000
PROMOTE_START_US = 1_500_000
PROMOTE_STEP_US = 400_000


class BootstrapError(RuntimeError):
    """The scripted bootstrap did not converge to the expected routing state."""


@dataclass(frozen=True)
class GroupSpec:
    gid: GroupId
    ssid: str
    passphrase: str
    owner: NodeId
    members: tuple[NodeId, ...]  # non-owner native members, relays included


@dataclass(frozen=True)
class RelaySpec:
    node: NodeId
    native: GroupId
    adjacent: GroupId


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    groups: tuple[GroupSpec, ...]
    relays: tuple[RelaySpec, ...]
    subscriptions: tuple[tuple[NodeId, tuple[TopicId, ...]], ...]
    source: NodeId
    sink: NodeId
    topic: TopicId

    def all_nodes(self) -> list[NodeId]:
        out = []
        for g in self.groups:
            out.append(g.owner)
            out.extend(g.members)
        return sorted(out)

    def membership(self) -> dict[NodeId, GroupId]:
        home = {}
        for g in self.groups:
            home[g.owner] = g.gid
            for m in g.members:
                home[m] = g.gid
        return home

    def subscription_map(self) -> dict[NodeId, frozenset[TopicId]]:
        return {n: frozenset(ts) for n, ts in self.subscriptions}

    def to_topology(self) -> tuple[dict[NodeId, Role], dict[GroupId, NodeId], list[Endpoint]]:
        """Steady-state topology (post-promotion) for structural validation."""
        relays = {r.node: r for r in self.relays}
        nodes: dict[NodeId, Role] = {}
        groups: dict[GroupId, NodeId] = {}
        endpoints: list[Endpoint] = []
        for g in self.groups:
            groups[g.gid] = g.owner
            nodes[g.owner] = Role.GROUP_OWNER
            endpoints.append(Endpoint(g.owner, InterfaceKind.P2P_NATIVE, g.gid, DEFAULT_GO_ADDR))
            addr = FIRST_PEER_ADDR
            for m in sorted(g.members):
                nodes[m] = Role.PRIMARY_RELAY if m in relays else Role.ORDINARY_PEER
                endpoints.append(Endpoint(m, InterfaceKind.P2P_NATIVE, g.gid, addr))
                addr += 1
        legacy_addr = {g.gid: FIRST_LEGACY_ADDR for g in self.groups}
        for r in self.relays:
            endpoints.append(
                Endpoint(r.node, InterfaceKind.LEGACY_CLIENT, r.adjacent, legacy_addr[r.adjacent])
            )
            legacy_addr[r.adjacent] += 1
        return nodes, groups, endpoints

    def validate(self) -> list[Violation]:
        nodes, groups, endpoints = self.to_topology()
        problems = list(validate_topology(nodes, groups, endpoints))
        home = self.membership()
        if self.source not in home:
            problems.append(Violation("missing node", f"source {self.source} not in topology"))
        if self.sink not in home:
            problems.append(Violation("missing node", f"sink {self.sink} not in topology"))
        subs = self.subscription_map()
        if self.topic not in subs.get(self.sink, frozenset()):
            problems.append(Violation("sink subscription", f"sink {self.sink} does not subscribe {self.topic}"))
        for r in self.relays:
            if home.get(r.node) != r.native:
                problems.append(Violation("relay home", f"relay {r.node} declared native to {r.native}"))
        return problems

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "groups": [
                {
                    "gid": g.gid,
                    "ssid": g.ssid,
                    "passphrase": g.passphrase,
                    "owner": g.owner,
                    "members": list(g.members),
                }
                for g in self.groups
            ],
            "relays": [
                {"node": r.node, "native": r.native, "adjacent": r.adjacent} for r in self.relays
            ],
            "subscriptions": {n: sorted(ts) for n, ts in self.subscriptions},
            "source": self.source,
            "sink": self.sink,
            "topic": self.topic,
        }

    @staticmethod
    def from_dict(data: dict) -> "ScenarioSpec":
        return ScenarioSpec(
            name=data["name"],
            groups=tuple(
                GroupSpec(
                    gid=g["gid"],
                    ssid=g["ssid"],
                    passphrase=g["passphrase"],
                    owner=g["owner"],
                    members=tuple(g["members"]),
                )
                for g in data["groups"]
            ),
            relays=tuple(
                RelaySpec(node=r["node"], native=r["native"], adjacent=r["adjacent"])
                for r in data.get("relays", [])
            ),
            subscriptions=tuple(
                sorted((n, tuple(sorted(ts))) for n, ts in data.get("subscriptions", {}).items())
            ),
            source=data["source"],
            sink=data["sink"],
            topic=data["topic"],
        )

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: Path) -> "ScenarioSpec":
        return ScenarioSpec.from_dict(json.loads(Path(path).read_text()))


def _scenario(name, groups, relays, subs, source, sink, topic="data") -> ScenarioSpec:
    return ScenarioSpec(
        name=name,
        groups=tuple(groups),
        relays=tuple(relays),
        subscriptions=tuple(sorted((n, tuple(sorted(ts))) for n, ts in subs.items())),
        source=source,
        sink=sink,
        topic=topic,
    )


def builtin_scenarios() -> dict[str, ScenarioSpec]:
    """The four validation cases: N devices, M groups."""
    return {
        "2d1g": _scenario(
            "2d1g",
            [GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11",))],
            [],
            {"GO1": ("data",)},
            source="P11",
            sink="GO1",
        ),
        "3d1g": _scenario(
            "3d1g",
            [GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11", "P12"))],
            [],
            {"P12": ("data",)},
            source="P11",
            sink="P12",
        ),
        "4d2g": _scenario(
            "4d2g",
            [
                GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11", "R1")),
                GroupSpec("g2", "net-g2", "pass-g2", "GO2", ("P21",)),
            ],
            [RelaySpec("R1", "g1", "g2")],
            {"P21": ("data",)},
            source="P11",
            sink="P21",
        ),
        "5d3g": _scenario(
            "5d3g",
            [
                GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11", "R1")),
                GroupSpec("g2", "net-g2", "pass-g2", "GO2", ("R2",)),
                GroupSpec("g3", "net-g3", "pass-g3", "GO3", ()),
            ],
            [RelaySpec("R1", "g1", "g2"), RelaySpec("R2", "g2", "g3")],
            {"GO3": ("data",)},
            source="P11",
            sink="GO3",
        ),
    }


def extended_scenarios() -> dict[str, ScenarioSpec]:
    """Builtins plus the strict five-device three-group variant, where the
    source itself carries the first relay role."""
    out = builtin_scenarios()
    out["5d3g-paper"] = _scenario(
        "5d3g-paper",
        [
            GroupSpec("g1", "net-g1", "pass-g1", "GO1", ("P11",)),
            GroupSpec("g2", "net-g2", "pass-g2", "GO2", ("R2",)),
            GroupSpec("g3", "net-g3", "pass-g3", "GO3", ()),
        ],
        [RelaySpec("P11", "g1", "g2"), RelaySpec("R2", "g2", "g3")],
        {"GO3": ("data",)},
        source="P11",
        sink="GO3",
    )
    return out


def get_scenario(name_or_path: str) -> ScenarioSpec:
    reg = extended_scenarios()
    if name_or_path in reg:
        return reg[name_or_path]
    path = Path(name_or_path)
    if path.exists():
        return ScenarioSpec.load(path)
    raise KeyError(f"unknown scenario {name_or_path!r}")


# -- ground-truth routing state ----------------------------------------------


def group_anchors(
    spec: ScenarioSpec,
    dead: frozenset[NodeId] = frozenset(),
    relays: Optional[Iterable[RelaySpec]] = None,
) -> dict[GroupId, NodeId]:
    """Steady-state anchor per group: native relay, else visiting relay,
    else the owner."""
    pool = list(relays) if relays is not None else list(spec.relays)
    anchors: dict[GroupId, NodeId] = {}
    for g in spec.groups:
        native = [r.node for r in pool if r.native == g.gid and r.node not in dead]
        visiting = [r.node for r in pool if r.adjacent == g.gid and r.node not in dead]
        if native:
            anchors[g.gid] = sorted(native)[0]
        elif visiting:
            anchors[g.gid] = sorted(visiting)[0]
        else:
            anchors[g.gid] = g.owner
    return anchors


def _steady_state(
    spec: ScenarioSpec,
    subscriptions: Optional[dict[NodeId, frozenset[TopicId]]],
    dead: frozenset[NodeId],
    relays: Optional[Iterable[RelaySpec]] = None,
) -> tuple[dict[NodeId, frozenset[TopicId]], dict[tuple[NodeId, NodeId], str], frozenset[NodeId], dict[GroupId, NodeId]]:
    pool = list(relays) if relays is not None else list(spec.relays)
    anchors = group_anchors(spec, dead, pool)
    home = spec.membership()
    subs = subscriptions if subscriptions is not None else spec.subscription_map()
    live = [n for n in spec.all_nodes() if n not in dead]
    relay_home = {r.node: r for r in pool if r.node not in dead}

    edges: dict[tuple[NodeId, NodeId], str] = {}

    def add_edge(a: NodeId, b: NodeId, label: str) -> None:
        key = (a, b) if a <= b else (b, a)
        edges[key] = label

    for n in live:
        g = home[n]
        anchor = anchors[g]
        if n == anchor:
            continue
        if n in relay_home and relay_home[n].adjacent == g:
            continue  # handled below as a relay attachment
        anchor_is_visiting = home.get(anchor) != g
        add_edge(n, anchor, EDGE_INTER_LEGACY if anchor_is_visiting else EDGE_INTRA_P2P)
    for r in relay_home.values():
        target = anchors[r.adjacent]
        if target != r.node:
            add_edge(r.node, target, EDGE_INTER_LEGACY)

    members = {n: subs.get(n, frozenset()) for n in live}
    return members, edges, frozenset(relay_home), anchors


def expected_view(
    spec: ScenarioSpec,
    subscriptions: Optional[dict[NodeId, frozenset[TopicId]]] = None,
    dead: frozenset[NodeId] = frozenset(),
) -> AnchorView:
    """The global backbone and subscription state the bootstrap should reach.

    Valid only while the backbone is connected; after partitioning deaths use
    ``ground_truth_tables``, which recomputes per connected component.
    """
    members, edges, relays, anchors = _steady_state(spec, subscriptions, dead)
    root = anchors[sorted(anchors)[0]]
    return AnchorView(anchor=root, members=members, edges=edges, relays=relays)


def ground_truth_tables(
    spec: ScenarioSpec,
    subscriptions: Optional[dict[NodeId, frozenset[TopicId]]] = None,
    dead: frozenset[NodeId] = frozenset(),
    anchor_fanout: str = routing.SUBSCRIBER_DIRECTED,
    relays: Optional[Iterable[RelaySpec]] = None,
) -> dict[NodeId, routing.ForwardingTable]:
    """Per-node tables from global state, one tree per connected component."""
    members, edges, relays, anchors = _steady_state(spec, subscriptions, dead, relays)
    adj: dict[NodeId, list[NodeId]] = {n: [] for n in members}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen: set[NodeId] = set()
    tables: dict[NodeId, routing.ForwardingTable] = {}
    anchor_nodes = set(anchors.values())
    for start in sorted(members):
        if start in seen:
            continue
        comp = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in comp:
                    comp.add(v)
                    stack.append(v)
        seen |= comp
        root = sorted(comp & anchor_nodes)[0] if comp & anchor_nodes else sorted(comp)[0]
        view = AnchorView(
            anchor=root,
            members={n: members[n] for n in comp},
            edges={e: lbl for e, lbl in edges.items() if e[0] in comp},
            relays=frozenset(r for r in relays if r in comp),
        )
        tables.update(recompute_tables(view, anchor_fanout))
    return tables


def expected_hops(spec: ScenarioSpec) -> int:
    """Backbone path length from source to sink when nothing is lost."""
    view = expected_view(spec)
    adj: dict[NodeId, list[NodeId]] = {n: [] for n in view.members}
    for a, b in view.edges:
        adj[a].append(b)
        adj[b].append(a)
    dist = {spec.source: 0}
    frontier = [spec.source]
    while frontier:
        nxt = []
        for u in frontier:
            for v in sorted(adj[u]):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist[spec.sink]


def expected_path(spec: ScenarioSpec) -> list[NodeId]:
    """The forwarding path the scenario is meant to exercise."""
    view = expected_view(spec)
    adj: dict[NodeId, list[NodeId]] = {n: [] for n in view.members}
    for a, b in view.edges:
        adj[a].append(b)
        adj[b].append(a)
    prev: dict[NodeId, NodeId] = {}
    frontier = [spec.source]
    seen = {spec.source}
    while frontier:
        nxt = []
        for u in frontier:
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    prev[v] = u
                    nxt.append(v)
        frontier = nxt
    path = [spec.sink]
    while path[-1] != spec.source:
        path.append(prev[path[-1]])
    return path[::-1]


# -- execution -----------------------------------------------------------------


def bootstrap_script(spec: ScenarioSpec, world: World) -> None:
    """Schedule the join, subscribe and promote events for a scenario."""
    t = JOIN_START_US
    for g in spec.groups:
        for m in sorted(g.members):
            world.at(t, ("join", m))
            t += JOIN_STEP_US
    t = SUBSCRIBE_START_US
    for n, topics in spec.subscriptions:
        for topic in topics:
            world.at(t, ("subscribe", n, topic))
            t += SUBSCRIBE_STEP_US
    t = PROMOTE_START_US
    home = spec.membership()
    for r in spec.relays:
        owner = next(g.owner for g in spec.groups if g.gid == r.native)
        creds = world.promote_credentials(r.adjacent)
        world.at(t, ("promote", owner, r.node, creds))
        t += PROMOTE_STEP_US


def build_world(
    spec: ScenarioSpec,
    cfg: Optional[SimConfig] = None,
    seed: int = 0,
    trace: bool = False,
) -> World:
    groups = [NetGroup(g.gid, g.ssid, g.passphrase, g.owner) for g in spec.groups]
    world = World(groups, spec.membership(), cfg=cfg, seed=seed, trace=trace)
    world.set_flow(spec.source, spec.topic, spec.sink)
    return world


def verify_bootstrap(spec: ScenarioSpec, world: World) -> None:
    """Compare live routing state against the centralized recomputation."""
    want = ground_truth_tables(spec, anchor_fanout=world.cfg.anchor_fanout)
    got = world.node_tables()
    for node in sorted(want):
        expected = want[node].as_dict()
        actual = got.get(node)
        if actual != expected:
            raise BootstrapError(
                f"scenario {spec.name}: node {node} converged to {actual}, expected {expected}"
            )
    errors = [e for n in sorted(world.nodes) for e in world.nodes[n].errors]
    if errors:
        raise BootstrapError(f"scenario {spec.name}: bootstrap errors: {errors}")


@dataclass(frozen=True)
class ExperimentPlan:
    loads_bps: tuple[int, ...] = tuple(m * 1_000_000 for m in range(1, 26, 2))
    runs_per_point: int = 20
    seed: int = 7
    duration_us: int = 10_000_000

    def validate(self) -> None:
        if not self.loads_bps or any(l <= 0 for l in self.loads_bps):
            raise ValueError("loads must be non-empty and positive")
        if self.runs_per_point < 1:
            raise ValueError("runs_per_point must be >= 1")


@dataclass(frozen=True)
class RunResult:
    scenario: str
    load_bps: int
    run: int
    packets_sent: int
    packets_delivered: int
    throughput_bps: float
    loss: float
    hops: int


def point_seed(base: int, load_idx: int, run_idx: int) -> int:
    """Per-point seed so any single sweep point is independently re-runnable."""
    return (base ^ (load_idx << 16) ^ run_idx) & 0x7FFFFFFF


def run_single(
    spec: ScenarioSpec,
    load_bps: int,
    cfg: Optional[SimConfig] = None,
    seed: int = 0,
    duration_us: int = 10_000_000,
    run_idx: int = 0,
    trace: bool = False,
    check_bootstrap: bool = True,
) -> tuple[RunResult, Optional[list[str]]]:
    cfg = cfg or SimConfig()
    world = build_world(spec, cfg=cfg, seed=seed, trace=trace)
    bootstrap_script(spec, world)
    world.run_until(TRAFFIC_START_US)
    if check_bootstrap:
        verify_bootstrap(spec, world)
    gen = TrafficGenerator(
        source=spec.source,
        topic=spec.topic,
        offered_load_bps=load_bps,
        packet_payload=cfg.payload_bytes,
        duration_us=duration_us,
    )
    for t in generate_traffic(gen, start_us=TRAFFIC_START_US):
        world.at(t, ("publish", spec.source, spec.topic, cfg.payload_bytes))
    world.run_until(TRAFFIC_START_US + duration_us)
    counters = world.collect(duration_us)
    result = RunResult(
        scenario=spec.name,
        load_bps=load_bps,
        run=run_idx,
        packets_sent=counters.packets_sent,
        packets_delivered=counters.packets_delivered,
        throughput_bps=counters.throughput_bps,
        loss=counters.loss,
        hops=counters.hops_observed,
    )
    return result, world.trace_lines


def _run_point(args: tuple) -> RunResult:
    spec_data, cfg, load_bps, seed, duration_us, run_idx = args
    spec = ScenarioSpec.from_dict(spec_data)
    result, _ = run_single(
        spec, load_bps, cfg=cfg, seed=seed, duration_us=duration_us, run_idx=run_idx
    )
    return result


def run_experiment(
    spec: ScenarioSpec,
    plan: ExperimentPlan,
    cfg: Optional[SimConfig] = None,
    workers: int = 1,
) -> list[RunResult]:
    """Sweep offered loads; each (load, run) point owns its simulator."""
    plan.validate()
    cfg = cfg or SimConfig()
    jobs = [
        (
            spec.to_dict(),
            cfg,
            load,
            point_seed(plan.seed, li, ri),
            plan.duration_us,
            ri,
        )
        for li, load in enumerate(plan.loads_bps)
        for ri in range(plan.runs_per_point)
    ]
    if workers <= 1:
        results = [_run_point(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs, chunksize=4))
    results.sort(key=lambda r: (r.scenario, r.load_bps, r.run))
    return results


# -- CSV ------------------------------------------------------------------------

CSV_HEADER = "scenario,load_bps,run,sent,delivered,throughput_bps,loss"


def write_csv(results: Iterable[RunResult], path: Path, meta: Optional[str] = None) -> None:
    rows = sorted(results, key=lambda r: (r.scenario, r.load_bps, r.run))
    lines = []
    if meta:
        lines.append(f"# {meta}")
    lines.append(CSV_HEADER)
    for r in rows:
        lines.append(
            f"{r.scenario},{r.load_bps},{r.run},{r.packets_sent},{r.packets_delivered},"
            f"{r.throughput_bps:.3f},{r.loss:.6f}"
        )
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def read_csv(path: Path) -> tuple[str, list[RunResult]]:
    meta = ""
    results = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            meta = line[1:].strip()
            continue
        if not line or line == CSV_HEADER:
            continue
        scenario, load, run, sent, delivered, thr, loss = line.split(",")
        results.append(
            RunResult(
                scenario=scenario,
                load_bps=int(load),
                run=int(run),
                packets_sent=int(sent),
                packets_delivered=int(delivered),
                throughput_bps=float(thr),
                loss=float(loss),
                hops=0,
            )
        )
    return meta, results


def aggregate(results: Iterable[RunResult]) -> dict[tuple[str, int], tuple[float, float]]:
    """Per (scenario, load) arithmetic means of throughput and loss."""
    buckets: dict[tuple[str, int], list[RunResult]] = {}
    for r in results:
        buckets.setdefault((r.scenario, r.load_bps), []).append(r)
    return {
        key: (mean(r.throughput_bps for r in rs), mean(r.loss for r in rs))
        for key, rs in sorted(buckets.items())
    }
