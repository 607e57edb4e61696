"""Shared helpers: randomized instances and a quiesced-world builder."""

from __future__ import annotations

import random

import pytest

from wfdsim.netsim import SimConfig, World
from wfdsim.scenarios import (
    GroupSpec,
    RelaySpec,
    ScenarioSpec,
    TRAFFIC_START_US,
    bootstrap_script,
    build_world,
)


def random_spec(rng: random.Random, name: str = "rand") -> ScenarioSpec:
    """Random topology: up to 3 groups, 8 nodes, 5 topics, tree of groups.

    Relay orientations are re-drawn until every group hosts at most one
    native relay (the only pattern the role rules define).
    """
    while True:
        n_groups = rng.randint(1, 3)
        gids = [f"g{i + 1}" for i in range(n_groups)]
        owners = {g: f"GO{i + 1}" for i, g in enumerate(gids)}

        bridges = [(gids[i], gids[i + 1]) for i in range(n_groups - 1)]
        if n_groups == 2 and rng.random() < 0.3:
            bridges.append((gids[1], gids[0]))  # second relay in the reverse direction
        orientations = []
        for a, b in bridges:
            if (b, a) in [(x[0], x[1]) for x in orientations]:
                orientations.append((a, b))
            else:
                orientations.append((a, b) if rng.random() < 0.5 else (b, a))
        natives = [a for a, _ in orientations]
        if len(set(natives)) != len(natives):
            continue

        relays = [
            RelaySpec(f"R{i + 1}", native, adjacent)
            for i, (native, adjacent) in enumerate(orientations)
        ]
        members: dict[str, list[str]] = {g: [] for g in gids}
        for r in relays:
            members[r.native].append(r.node)
        budget = 8 - n_groups - len(relays)
        extra = rng.randint(0, max(0, budget))
        for i in range(extra):
            g = rng.choice(gids)
            members[g].append(f"N{i + 1}")

        topics = tuple(f"t{i}" for i in range(rng.randint(1, 5)))
        all_nodes = sorted(list(owners.values()) + [m for ms in members.values() for m in ms])
        subs: dict[str, list[str]] = {}
        for n in all_nodes:
            chosen = [t for t in topics if rng.random() < 0.35]
            if chosen:
                subs[n] = chosen

        topic = rng.choice(topics)
        source = rng.choice(all_nodes)
        subscribers = sorted(n for n, ts in subs.items() if topic in ts)
        sink = subscribers[0] if subscribers else source

        return ScenarioSpec(
            name=name,
            groups=tuple(
                GroupSpec(g, f"net-{g}", f"pass-{g}", owners[g], tuple(sorted(members[g])))
                for g in gids
            ),
            relays=tuple(relays),
            subscriptions=tuple(sorted((n, tuple(sorted(ts))) for n, ts in subs.items())),
            source=source,
            sink=sink,
            topic=topic,
        )


def quiesced_world(
    spec: ScenarioSpec,
    cfg: SimConfig | None = None,
    seed: int = 0,
    trace: bool = False,
) -> World:
    """Build, bootstrap and run a world to the traffic-start instant."""
    world = build_world(spec, cfg=cfg or SimConfig(), seed=seed, trace=trace)
    bootstrap_script(spec, world)
    world.run_until(TRAFFIC_START_US)
    return world


@pytest.fixture
def cfg() -> SimConfig:
    return SimConfig()
