"""Synthetic environments, routes and templated directions.

Also reads and writes the JSON-lines sample format, so an externally
supplied dataset in the same schema can be loaded alongside generated ones.
"""
from __future__ import annotations

import json
import random
import re
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .graph import (
    Behavior,
    BehavioralGraph,
    GraphError,
    LocationType,
    NodeId,
    NodeNormalizer,
    Triplet,
    canonicalize,
    execute_plan,
)

SINGLE = "single"
DOUBLE = "double"

SPLITS = ("train", "test-repeated", "test-new")

PLACE_TYPES = (
    LocationType.ROOM,
    LocationType.LAB,
    LocationType.OFFICE,
    LocationType.KITCHEN,
    LocationType.BATHROOM,
)
_PLACE_WEIGHTS = (4, 1, 2, 1, 1)

CORRIDOR_MOVES = (Behavior.CF, Behavior.LT, Behavior.RT, Behavior.SP, Behavior.ST)
_MOVE_WEIGHTS = {Behavior.CF: 4, Behavior.LT: 2, Behavior.RT: 2, Behavior.SP: 1, Behavior.ST: 1}

ENTER = {"left": Behavior.IO_LEFT, "right": Behavior.IO_RIGHT}
EXIT = {"left": Behavior.OO_LEFT, "right": Behavior.OO_RIGHT}
CROSS = {"left": Behavior.CH_LEFT, "right": Behavior.CH_RIGHT}


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class NavSample:
    graph: BehavioralGraph
    source: NodeId
    dest: NodeId
    instruction: tuple[str, ...]
    gold_plan: tuple[Triplet, ...]
    plan_kind: str = SINGLE

    def __post_init__(self) -> None:
        object.__setattr__(self, "instruction", tuple(self.instruction))
        object.__setattr__(self, "gold_plan", tuple(self.gold_plan))
        if not self.instruction:
            raise GraphError("instruction is empty")
        if self.plan_kind not in (SINGLE, DOUBLE):
            raise GraphError(f"unknown plan kind {self.plan_kind!r}")

    @property
    def env_id(self) -> str:
        return self.graph.env_id

    @property
    def plan_key(self) -> tuple:
        return tuple(t.key for t in self.gold_plan)

    def behaviors(self) -> list[Behavior]:
        return [t.behavior for t in self.gold_plan]


@dataclass(frozen=True)
class SizeParams:
    rooms: tuple[int, int] = (4, 9)
    corridors: tuple[int, int] = (4, 6)
    halls: tuple[int, int] = (0, 1)
    max_triplets: int = 40

    def __post_init__(self) -> None:
        for name in ("rooms", "corridors", "halls"):
            lo, hi = getattr(self, name)
            if lo > hi or hi < 0 or lo < 0:
                raise InfeasibleError(f"bad {name} range {lo}..{hi}")
        if self.corridors[0] < 1 or self.rooms[1] < 1:
            raise InfeasibleError("need at least one corridor and one room")
        if self.max_triplets < 2:
            raise InfeasibleError("max_triplets must be at least 2")


@dataclass(frozen=True)
class SplitSpec:
    train_envs: frozenset[str]
    repeated_routes_heldout: float
    new_envs: frozenset[str]

    def __post_init__(self) -> None:
        if self.train_envs & self.new_envs:
            raise InfeasibleError("test-new environments overlap training environments")


@dataclass
class Corpus:
    train: list[NavSample]
    test_repeated: list[NavSample]
    test_new: list[NavSample]
    split: SplitSpec
    seed: int = 0
    params: dict = field(default_factory=dict)

    def by_split(self) -> dict[str, list[NavSample]]:
        return {"train": self.train, "test-repeated": self.test_repeated, "test-new": self.test_new}


# -- environments -----------------------------------------------------------


class _Builder:
    def __init__(self) -> None:
        self.triplets: list[Triplet] = []
        self.counters: Counter = Counter()
        self.used: dict[NodeId, set[Behavior]] = {}

    def node(self, kind: LocationType) -> NodeId:
        self.counters[kind] += 1
        n = NodeId(kind, self.counters[kind])
        self.used[n] = set()
        return n

    def add(self, a: NodeId, b: Behavior, c: NodeId) -> None:
        assert b not in self.used[a], (a, b)
        self.used[a].add(b)
        self.triplets.append(Triplet(a, b, c))

    def free_moves(self, n: NodeId) -> list[Behavior]:
        return [m for m in CORRIDOR_MOVES if m not in self.used[n]]


def _pick_move(rng: random.Random, options: Sequence[Behavior]) -> Behavior:
    return rng.choices(list(options), weights=[_MOVE_WEIGHTS[m] for m in options])[0]


def generate_environment(
    seed: int, size_params: SizeParams | None = None, env_id: str | None = None
) -> BehavioralGraph:
    """Build a connected indoor environment.

    Corridor segments form a random tree (plus at most one extra loop) joined
    by corridor moves; places and halls hang off corridor sides.  Every edge
    has its reverse, and no node has two outgoing edges with the same
    behavior, so a source plus a behavior sequence pins down the route.
    """
    sp = size_params or SizeParams()
    rng = random.Random(seed)
    g = _Builder()
    budget = sp.max_triplets

    n_corr = rng.randint(*sp.corridors)
    if 2 * (n_corr - 1) > budget:
        raise InfeasibleError(f"{n_corr} corridors need more than {budget} triplets")
    corridors = [g.node(LocationType.CORRIDOR) for _ in range(n_corr)]
    links: set[frozenset] = set()
    for i in range(1, n_corr):
        here = corridors[i]
        options = [c for c in corridors[:i] if g.free_moves(c)]
        there = rng.choice(options)
        g.add(there, _pick_move(rng, g.free_moves(there)), here)
        g.add(here, _pick_move(rng, g.free_moves(here)), there)
        links.add(frozenset((here, there)))
    if n_corr >= 4 and rng.random() < 0.5 and len(g.triplets) + 2 <= budget:
        a, b = rng.sample(corridors, 2)
        if frozenset((a, b)) not in links and g.free_moves(a) and g.free_moves(b):
            g.add(a, _pick_move(rng, g.free_moves(a)), b)
            g.add(b, _pick_move(rng, g.free_moves(b)), a)

    # each corridor segment has one door slot on its left and one on its right
    slots = [(c, side) for c in corridors for side in ("left", "right")]
    rng.shuffle(slots)
    occupant: dict[tuple[NodeId, str], NodeId] = {}

    n_halls = rng.randint(*sp.halls)
    for _ in range(n_halls):
        free = [s for s in slots if s not in occupant]
        if not free or len(g.triplets) + 2 > budget:
            break
        hall = g.node(LocationType.HALL)
        exits = list(CROSS)
        rng.shuffle(exits)
        n_links = 2 if len(free) >= 2 and len(g.triplets) + 4 <= budget else 1
        chosen = []
        for slot in free:
            if len(chosen) == n_links:
                break
            if all(slot[0] != c for c, _ in chosen):
                chosen.append(slot)
        for (corr, side), turn in zip(chosen, exits):
            occupant[(corr, side)] = hall
            g.add(corr, ENTER[side], hall)
            g.add(hall, CROSS[turn], corr)

    n_rooms = rng.randint(*sp.rooms)
    placed = 0
    for _ in range(n_rooms):
        free = [s for s in slots if s not in occupant]
        if not free or len(g.triplets) + 2 > budget:
            break
        kind = rng.choices(PLACE_TYPES, weights=_PLACE_WEIGHTS)[0]
        place = g.node(kind)
        corr, side = free[0]
        occupant[(corr, side)] = place
        g.add(corr, ENTER[side], place)
        g.add(place, EXIT[rng.choice(("left", "right"))], corr)
        placed += 1
    if placed < sp.rooms[0]:
        raise InfeasibleError(
            f"only {placed} of {sp.rooms[0]} places fit ({n_corr} corridors, budget {budget})"
        )

    # places facing each other across a corridor get an oio pair
    for corr in corridors:
        a, b = occupant.get((corr, "left")), occupant.get((corr, "right"))
        if a is None or b is None or LocationType.HALL in (a.type, b.type):
            continue
        if rng.random() < 0.5 and len(g.triplets) + 2 <= budget:
            g.add(a, Behavior.OIO, b)
            g.add(b, Behavior.OIO, a)

    graph = canonicalize(BehavioralGraph(env_id or f"env-{seed}", tuple(g.triplets)))
    assert graph.is_connected()
    return graph


# -- routes -------------------------------------------------------------------


def shortest_plan(graph: BehavioralGraph, source: NodeId, dest: NodeId) -> list[Triplet] | None:
    """Breadth-first shortest triplet chain; ties resolve in canonical order."""
    out: dict[NodeId, list[Triplet]] = {}
    for t in sorted(graph.triplets, key=lambda t: t.key):
        out.setdefault(t.origin, []).append(t)
    back: dict[NodeId, Triplet | None] = {source: None}
    queue = deque([source])
    while queue:
        here = queue.popleft()
        if here == dest:
            break
        for t in out.get(here, ()):
            if t.target not in back:
                back[t.target] = t
                queue.append(t.target)
    if dest not in back or source == dest:
        return None
    plan = []
    node = dest
    while back[node] is not None:
        plan.append(back[node])
        node = back[node].origin
    return plan[::-1]


def reachable(graph: BehavioralGraph, source: NodeId) -> set[NodeId]:
    out: dict[NodeId, list[NodeId]] = {}
    for t in graph.triplets:
        out.setdefault(t.origin, []).append(t.target)
    seen = {source}
    queue = deque([source])
    while queue:
        for nxt in out.get(queue.popleft(), ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _endpoints(graph: BehavioralGraph) -> list[NodeId]:
    nodes = sorted(graph.nodes, key=lambda n: n.canonical)
    places = [n for n in nodes if n.type in PLACE_TYPES]
    return places if len(places) >= 2 else nodes


def sample_route(graph: BehavioralGraph, seed: int | random.Random):
    """Pick a random (source, dest) pair and its shortest plan."""
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    ends = _endpoints(graph)
    pairs = []
    for s in ends:
        reach = reachable(graph, s)
        pairs.extend((s, d) for d in ends if d != s and d in reach)
    if not pairs:
        raise InfeasibleError(f"no reachable source/dest pair in {graph.env_id}")
    source, dest = rng.choice(pairs)
    plan = shortest_plan(graph, source, dest)
    assert plan is not None and execute_plan(graph, source, plan) == dest
    return source, dest, plan


# -- instructions -------------------------------------------------------------

_TEMPLATES: dict[str, tuple[str, ...]] = {
    "oo": (
        "exit the {src} and turn {d}",
        "go out of the {src} and turn {d}",
        "leave the {src} then turn {d}",
        "walk out of the {src} and head {d}",
    ),
    "io": (
        "turn {d} and enter the {dst}",
        "go {d} into the {dst}",
        "enter the {dst} on your {d}",
    ),
    "oio": (
        "exit the {src} and enter the {dst} straight ahead",
        "leave the {src} and walk straight into the {dst}",
        "go out and enter the {dst} across from the {src}",
    ),
    "turn": (
        "turn {d} at the intersection",
        "take a {d} at the intersection",
        "make a {d} turn at the junction",
    ),
    "cf": (
        "follow the corridor",
        "go straight down the corridor",
        "continue along the hallway",
        "walk down the corridor",
    ),
    "sp": (
        "go straight at the t intersection",
        "keep straight at the t junction",
        "continue straight past the t intersection",
    ),
    "st": (
        "go straight through the corridor",
        "pass straight through the corridor",
        "keep going straight through the hallway",
    ),
    "ch": (
        "cross the hall and turn {d}",
        "walk across the hall then turn {d}",
        "go through the hall and turn {d}",
    ),
}

_FAMILY = {
    Behavior.OO_LEFT: "oo",
    Behavior.OO_RIGHT: "oo",
    Behavior.IO_LEFT: "io",
    Behavior.IO_RIGHT: "io",
    Behavior.OIO: "oio",
    Behavior.LT: "turn",
    Behavior.RT: "turn",
    Behavior.CF: "cf",
    Behavior.SP: "sp",
    Behavior.ST: "st",
    Behavior.CH_LEFT: "ch",
    Behavior.CH_RIGHT: "ch",
}

_CONNECTIVES = (",", "then", "and then", "and", ", then")
_SENTENCE_BREAKS = (".", "after that", ". then", "and afterwards")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _clause(t: Triplet, rng: random.Random) -> str:
    template = rng.choice(_TEMPLATES[_FAMILY[t.behavior]])
    return template.format(src=t.origin.type.value, dst=t.target.type.value, d=t.behavior.direction)


def _render_text(plan: Sequence[Triplet], rng: random.Random) -> str:
    parts = [_clause(plan[0], rng)]
    for t in plan[1:]:
        parts.append(rng.choice(_CONNECTIVES))
        parts.append(_clause(t, rng))
    return " ".join(parts)


def render_instruction(gold_plan: Sequence[Triplet], seed: int | random.Random) -> list[str]:
    """Turn a plan into lowercase word tokens, one paraphrased clause per step."""
    if not gold_plan:
        raise GraphError("cannot describe an empty plan")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    return tokenize(_render_text(gold_plan, rng))


def render_double(first: Sequence[Triplet], second: Sequence[Triplet], rng: random.Random) -> list[str]:
    text = f"{_render_text(first, rng)} {rng.choice(_SENTENCE_BREAKS)} {_render_text(second, rng)}"
    return tokenize(text)


# -- samples and corpora ------------------------------------------------------


def make_sample(graph: BehavioralGraph, rng: random.Random, double: bool = False) -> NavSample:
    source, mid, first = sample_route(graph, rng)
    if not double:
        return NavSample(graph, source, mid, render_instruction(first, rng), first, SINGLE)
    reach = reachable(graph, mid)
    ends = [d for d in _endpoints(graph) if d not in (mid, source) and d in reach]
    if not ends:
        return NavSample(graph, source, mid, render_instruction(first, rng), first, SINGLE)
    dest = rng.choice(ends)
    second = shortest_plan(graph, mid, dest)
    plan = first + second
    return NavSample(graph, source, dest, render_double(first, second, rng), plan, DOUBLE)


def _env_seed(seed: int, i: int) -> int:
    return (seed * 1_000_003 + i * 7919) % (2**31)


def build_corpus(
    n_envs: int = 20,
    samples_per_env: int = 100,
    double_fraction: float = 0.25,
    seed: int = 0,
    size_params: SizeParams | None = None,
    new_env_fraction: float = 0.15,
    heldout_fraction: float = 0.1,
) -> Corpus:
    """Generate environments and samples and split them three ways.

    The last ``new_env_fraction`` of environments only feed test-new.  In
    the remaining ones, a ``heldout_fraction`` of distinct plans is moved
    (with every sample carrying that plan) to test-repeated.
    """
    if n_envs < 2:
        raise InfeasibleError("need at least two environments (train and test-new)")
    if samples_per_env < 2:
        raise InfeasibleError("need at least two samples per environment")
    if not 0.0 <= double_fraction <= 1.0 or not 0.0 < heldout_fraction < 1.0:
        raise InfeasibleError("fractions out of range")
    sp = size_params or SizeParams()
    n_new = min(n_envs - 1, max(1, round(n_envs * new_env_fraction)))
    train, repeated, new = [], [], []
    train_ids, new_ids = set(), set()
    for i in range(n_envs):
        env_id = f"env-{i:03d}"
        rng = random.Random(_env_seed(seed, i))
        graph = generate_environment(rng.randrange(2**31), sp, env_id)
        n_double = round(samples_per_env * double_fraction)
        kinds = [True] * n_double + [False] * (samples_per_env - n_double)
        rng.shuffle(kinds)
        samples = [make_sample(graph, rng, double) for double in kinds]
        if i >= n_envs - n_new:
            new_ids.add(env_id)
            new.extend(samples)
            continue
        train_ids.add(env_id)
        keys = sorted(set(s.plan_key for s in samples))
        if len(keys) < 2:
            raise InfeasibleError(f"{env_id} yields fewer than two distinct plans")
        n_held = min(len(keys) - 1, max(1, round(len(keys) * heldout_fraction)))
        held = set(rng.sample(keys, n_held))
        for s in samples:
            (repeated if s.plan_key in held else train).append(s)
    split = SplitSpec(frozenset(train_ids), heldout_fraction, frozenset(new_ids))
    params = {
        "n_envs": n_envs,
        "samples_per_env": samples_per_env,
        "double_fraction": double_fraction,
        "new_env_fraction": new_env_fraction,
        "heldout_fraction": heldout_fraction,
        "size_params": {
            "rooms": list(sp.rooms),
            "corridors": list(sp.corridors),
            "halls": list(sp.halls),
            "max_triplets": sp.max_triplets,
        },
    }
    return Corpus(train, repeated, new, split, seed, params)


def corpus_counts(samples: Iterable[NavSample]) -> dict[str, int]:
    kinds = Counter(s.plan_kind for s in samples)
    return {"single": kinds[SINGLE], "double": kinds[DOUBLE], "total": kinds[SINGLE] + kinds[DOUBLE]}


# -- JSON lines ---------------------------------------------------------------


def sample_to_dict(sample: NavSample) -> dict:
    return {
        "env_id": sample.graph.env_id,
        "triplets": [t.to_list() for t in sample.graph.triplets],
        "source": sample.source.canonical,
        "dest": sample.dest.canonical,
        "instruction": " ".join(sample.instruction),
        "plan": [t.to_list() for t in sample.gold_plan],
        "plan_kind": sample.plan_kind,
    }


def sample_from_dict(doc: dict) -> NavSample:
    try:
        rows = doc["triplets"]
        names = NodeNormalizer(
            n for r in list(rows) + list(doc["plan"]) for n in (r[::2] if isinstance(r, list) else ())
        )
        triplets = [Triplet(names(a), Behavior.parse(b), names(c)) for a, b, c in rows]
        graph = canonicalize(BehavioralGraph(str(doc["env_id"]), tuple(triplets)))
        plan = [Triplet(names(a), Behavior.parse(b), names(c)) for a, b, c in doc["plan"]]
        source, dest = names(doc["source"]), names(doc["dest"])
        instruction = tokenize(doc["instruction"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GraphError):
            raise
        raise GraphError(f"malformed sample document: {exc!r}") from None
    kind = doc.get("plan_kind", SINGLE)
    return NavSample(graph, source, dest, instruction, plan, kind)


def write_jsonl(samples: Iterable[NavSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[NavSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}:{lineno}: bad JSON ({exc})") from None
            except GraphError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from None
    return out


def split_path(directory: str | Path, split: str) -> Path:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return Path(directory) / f"{split}.jsonl"


def write_corpus(corpus: Corpus, directory: str | Path) -> dict:
    """Write the three split files and return the manifest payload."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, samples in corpus.by_split().items():
        write_jsonl(samples, split_path(directory, name))
        counts[name] = corpus_counts(samples)
    return {
        "seed": corpus.seed,
        "params": corpus.params,
        "counts": counts,
        "split": {
            "train_envs": sorted(corpus.split.train_envs),
            "test_repeated_envs": sorted({s.env_id for s in corpus.test_repeated}),
            "new_envs": sorted(corpus.split.new_envs),
            "repeated_routes_heldout": corpus.split.repeated_routes_heldout,
        },
    }
