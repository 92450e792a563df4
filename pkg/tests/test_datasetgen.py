import json
import random
from collections import Counter, deque

import pytest

from graph2plan.datasetgen import (
    SPLITS,
    InfeasibleError,
    NavSample,
    SizeParams,
    build_corpus,
    generate_environment,
    make_sample,
    read_jsonl,
    render_instruction,
    sample_from_dict,
    sample_route,
    sample_to_dict,
    split_path,
    write_corpus,
)
from graph2plan.features import build_vocabulary
from graph2plan.graph import Behavior, GraphError, LocationType, execute_plan

from conftest import T

CORRIDOR_MOVES = {"cf", "lt", "rt", "sp", "st"}


def endpoint_rule_ok(t):
    """Origin/target location types each behavior may connect."""
    a, b, code = t.origin.type, t.target.type, t.behavior.code
    corr, hall = LocationType.CORRIDOR, LocationType.HALL
    place = lambda x: x not in (corr, hall)
    if code in CORRIDOR_MOVES:
        return a == corr and b == corr
    if code.startswith("oo-"):
        return place(a) and b == corr
    if code.startswith("io-"):
        return a == corr and b != corr
    if code == "oio":
        return place(a) and place(b)
    if code.startswith("ch-"):
        return a == hall and b == corr
    return False


def bfs_connected(graph):
    adj = {}
    for t in graph.triplets:
        adj.setdefault(t.origin, set()).add(t.target)
        adj.setdefault(t.target, set()).add(t.origin)
    start = next(iter(graph.nodes))
    seen, queue = {start}, deque([start])
    while queue:
        for n in adj[queue.popleft()]:
            if n not in seen:
                seen.add(n)
                queue.append(n)
    return seen == set(graph.nodes)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(n_envs=6, samples_per_env=40, seed=3)


def test_environment_is_deterministic():
    assert generate_environment(11) == generate_environment(11)
    assert generate_environment(11) != generate_environment(12)


def test_minimal_size_is_feasible():
    g = generate_environment(0, SizeParams(rooms=(1, 1), corridors=(1, 1), halls=(0, 0), max_triplets=2))
    assert len(g) == 2
    assert bfs_connected(g)


def test_impossible_size_is_rejected():
    with pytest.raises(InfeasibleError):
        generate_environment(0, SizeParams(rooms=(8, 8), corridors=(1, 1), halls=(0, 0), max_triplets=40))


@pytest.mark.parametrize("seed", range(100))
def test_environment_invariants(seed):
    g = generate_environment(seed)
    assert bfs_connected(g)
    assert len(g) <= 40
    bad = [str(t) for t in g.triplets if not endpoint_rule_ok(t)]
    assert not bad
    per_origin = Counter((t.origin, t.behavior) for t in g.triplets)
    assert max(per_origin.values()) == 1


def test_two_node_route_and_several_lengths():
    g = generate_environment(0, SizeParams(rooms=(1, 1), corridors=(1, 1), halls=(0, 0), max_triplets=2))
    source, dest, plan = sample_route(g, 0)
    assert len(plan) == 1 and execute_plan(g, source, plan) == dest
    rng = random.Random(5)
    lengths = set()
    for i in range(1000):
        g = generate_environment(i % 20)
        lengths.add(len(sample_route(g, rng)[2]))
    assert len(lengths) >= 3


def test_paraphrases_vary():
    plan = [T("room-1", "oo-left", "corridor-1"), T("corridor-1", "cf", "corridor-2")]
    texts = {" ".join(render_instruction(plan, seed)) for seed in range(10)}
    assert len(texts) >= 2
    assert any("left" in t for t in texts)
    assert any("corridor" in t or "hallway" in t for t in texts)


def test_every_behavior_has_at_least_three_phrasings():
    # a one-step plan for each behavior with consistent endpoint types
    ends = {
        "oo": ("room-1", "corridor-1"),
        "io": ("corridor-1", "room-1"),
        "oio": ("room-1", "lab-1"),
        "ch": ("hall-1", "corridor-1"),
    }
    for b in Behavior:
        family = b.code.split("-")[0]
        a, c = ends.get(family, ("corridor-1", "corridor-2"))
        texts = {" ".join(render_instruction([T(a, b.code, c)], s)) for s in range(60)}
        assert len(texts) >= 3, b


def test_double_fraction_zero_gives_only_single():
    c = build_corpus(n_envs=3, samples_per_env=20, double_fraction=0.0, seed=1)
    assert {s.plan_kind for split in c.by_split().values() for s in split} == {"single"}


def test_double_samples_chain_two_routes(corpus):
    doubles = [s for s in corpus.train if s.plan_kind == "double"]
    assert doubles
    for s in doubles:
        assert execute_plan(s.graph, s.source, s.gold_plan) == s.dest


def test_every_sample_reaches_its_destination(corpus):
    for split in corpus.by_split().values():
        for s in split:
            assert execute_plan(s.graph, s.source, s.gold_plan) == s.dest


def test_splits(corpus):
    train_envs = {s.env_id for s in corpus.train}
    new_envs = {s.env_id for s in corpus.test_new}
    assert not train_envs & new_envs
    assert {s.env_id for s in corpus.test_repeated} <= train_envs
    train_keys = {(s.env_id, s.plan_key) for s in corpus.train}
    assert not train_keys & {(s.env_id, s.plan_key) for s in corpus.test_repeated}
    assert len(corpus.train) + len(corpus.test_repeated) + len(corpus.test_new) == 240


def test_jsonl_round_trip_and_bytes(tmp_path, corpus):
    a, b = tmp_path / "a", tmp_path / "b"
    manifest = write_corpus(corpus, a)
    write_corpus(build_corpus(n_envs=6, samples_per_env=40, seed=3), b)
    for split in SPLITS:
        assert split_path(a, split).read_bytes() == split_path(b, split).read_bytes()
        loaded = read_jsonl(split_path(a, split))
        assert loaded == corpus.by_split()[split]
        assert manifest["counts"][split]["total"] == len(loaded)


def test_loader_counts_whatever_the_file_holds(tmp_path, corpus):
    path = tmp_path / "x.jsonl"
    lines = [json.dumps(sample_to_dict(s)) for s in corpus.train[:17]]
    path.write_text("\n".join(lines) + "\n")
    assert len(read_jsonl(path)) == 17


def test_loader_accepts_external_names_and_missing_kind():
    doc = {
        "env_id": "ext",
        "triplets": [["Office_A", "oo-right", "corridor_A"], ["corridor_A", "io-left", "Office_A"]],
        "source": "Office_A",
        "dest": "corridor_A",
        "instruction": "Leave the office, turn RIGHT.",
        "plan": [["Office_A", "oo-right", "corridor_A"]],
    }
    s = sample_from_dict(doc)
    assert s.plan_kind == "single"
    assert s.instruction == ("leave", "the", "office", "turn", "right")
    assert execute_plan(s.graph, s.source, s.gold_plan) == s.dest


def test_loader_reports_line_numbers(tmp_path, corpus):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(sample_to_dict(corpus.train[0])) + "\n{not json\n")
    with pytest.raises(GraphError, match=":2:"):
        read_jsonl(path)


def test_vocabulary_covers_training_tokens(corpus):
    vocab = build_vocabulary(corpus.train)
    assert not [w for s in corpus.train for w in s.instruction if w not in vocab]


def test_make_sample_double_has_both_parts():
    g = generate_environment(4)
    s = make_sample(g, random.Random(0), double=True)
    assert isinstance(s, NavSample)
    assert execute_plan(g, s.source, s.gold_plan) == s.dest
