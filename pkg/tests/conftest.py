import random

import pytest

from graph2plan.graph import Behavior, BehavioralGraph, LocationType, NodeId, Triplet


def random_triplets(k, seed=0, max_index=30):
    rng = random.Random(seed)
    types = list(LocationType)
    behaviors = list(Behavior)
    out = set()
    while len(out) < k:
        a = NodeId(rng.choice(types), rng.randint(1, max_index))
        b = NodeId(rng.choice(types), rng.randint(1, max_index))
        if a == b:
            continue
        out.add(Triplet(a, rng.choice(behaviors), b))
    out = sorted(out, key=lambda t: t.key)
    rng.shuffle(out)
    return out


def random_graph(k, seed=0, env_id="env-test"):
    return BehavioralGraph(env_id, tuple(random_triplets(k, seed)))


def T(a, b, c):
    return Triplet(NodeId.parse(a), Behavior(b), NodeId.parse(c))


@pytest.fixture
def figure1_graph():
    """Room, two corridor segments joined by cf, and a second room."""
    return BehavioralGraph(
        "figure-1",
        (
            T("room-1", "oo-left", "corridor-1"),
            T("corridor-1", "cf", "corridor-2"),
            T("corridor-2", "cf", "corridor-3"),
            T("corridor-3", "io-left", "room-2"),
            T("room-2", "oo-right", "corridor-3"),
            T("corridor-3", "cf", "corridor-2"),
            T("corridor-2", "lt", "corridor-1"),
            T("corridor-1", "io-right", "room-1"),
        ),
    )


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
