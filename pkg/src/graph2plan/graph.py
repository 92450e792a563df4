"""Behavioral navigation graphs.

Nodes are typed semantic locations (``room-1``, ``corridor-3``), edges are
robot behaviors, and the environment is stored as a set of unique
``(origin, behavior, target)`` triplets.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

DEFAULT_MAX_TRIPLETS = 300


class GraphError(ValueError):
    """Base class for malformed graphs, plans and documents."""


class DuplicateTripletError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class PlanError(GraphError):
    pass


class EmptyPlan(PlanError):
    pass


class BrokenChain(PlanError):
    pass


class UnknownTriplet(PlanError):
    pass


class PlanTooLong(GraphError):
    pass


class LocationType(enum.Enum):
    ROOM = "room"
    LAB = "lab"
    OFFICE = "office"
    KITCHEN = "kitchen"
    HALL = "hall"
    CORRIDOR = "corridor"
    BATHROOM = "bathroom"

    @classmethod
    def parse(cls, text: str) -> "LocationType":
        try:
            return cls(text)
        except ValueError:
            raise GraphError(f"unknown location type {text!r}") from None


class Behavior(enum.Enum):
    OO_LEFT = "oo-left"
    OO_RIGHT = "oo-right"
    IO_LEFT = "io-left"
    IO_RIGHT = "io-right"
    OIO = "oio"
    LT = "lt"
    RT = "rt"
    CF = "cf"
    SP = "sp"
    ST = "st"
    CH_LEFT = "ch-left"
    CH_RIGHT = "ch-right"

    @property
    def code(self) -> str:
        return self.value

    @property
    def direction(self) -> str | None:
        if self.value.endswith("left") or self is Behavior.LT:
            return "left"
        if self.value.endswith("right") or self is Behavior.RT:
            return "right"
        return None

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]

    @classmethod
    def parse(cls, text: str) -> "Behavior":
        try:
            return cls(text)
        except ValueError:
            raise GraphError(f"unknown behavior code {text!r}") from None


_DESCRIPTIONS = {
    Behavior.OO_LEFT: "Go out of the current place and turn left",
    Behavior.OO_RIGHT: "Go out of the current place and turn right",
    Behavior.IO_LEFT: "Turn left and enter the place straight ahead",
    Behavior.IO_RIGHT: "Turn right and enter the place straight ahead",
    Behavior.OIO: "Exit current place and enter straight ahead",
    Behavior.LT: "Turn left at the intersection",
    Behavior.RT: "Turn right at the intersection",
    Behavior.CF: "Follow (or go straight down) the corridor",
    Behavior.SP: "Go straight at a T intersection",
    Behavior.ST: "Go straight through the corridor",
    Behavior.CH_LEFT: "Cross the hall and turn left",
    Behavior.CH_RIGHT: "Cross the hall and turn right",
}

_NODE_RE = re.compile(r"^([a-z]+)-(\d+)$")


@dataclass(frozen=True, order=True)
class NodeId:
    type: LocationType = field(compare=False)
    index: int = field(compare=False)
    canonical: str = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.index < 0:
            raise GraphError(f"negative node index {self.index}")
        object.__setattr__(self, "canonical", f"{self.type.value}-{self.index}")

    def __str__(self) -> str:
        return self.canonical

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        m = _NODE_RE.match(text)
        if m is None:
            raise GraphError(f"malformed node name {text!r}, expected '<type>-<index>'")
        return cls(LocationType.parse(m.group(1)), int(m.group(2)))


@dataclass(frozen=True)
class Triplet:
    origin: NodeId
    behavior: Behavior
    target: NodeId

    def __post_init__(self) -> None:
        if self.origin == self.target:
            raise SelfLoopError(f"self-loop on {self.origin}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.origin.canonical, self.behavior.code, self.target.canonical)

    def __str__(self) -> str:
        return "<{}; {}; {}>".format(*self.key)

    def to_list(self) -> list[str]:
        return list(self.key)

    @classmethod
    def from_list(cls, row: Sequence[str]) -> "Triplet":
        if not isinstance(row, (list, tuple)) or len(row) != 3:
            raise GraphError(f"triplet must be a 3-element list, got {row!r}")
        return cls(NodeId.parse(row[0]), Behavior.parse(row[1]), NodeId.parse(row[2]))


class _Pad:
    """Placeholder entry in a padded triplet list."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "PAD"

    def __reduce__(self):
        return (_Pad, ())


PAD = _Pad()


@dataclass(frozen=True)
class BehavioralGraph:
    env_id: str
    triplets: tuple[Triplet, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "triplets", tuple(self.triplets))
        seen: set[Triplet] = set()
        for t in self.triplets:
            if not isinstance(t, Triplet):
                raise GraphError(f"not a triplet: {t!r}")
            if t in seen:
                raise DuplicateTripletError(f"duplicate triplet {t} in {self.env_id}")
            seen.add(t)
        object.__setattr__(self, "_set", frozenset(seen))

    @property
    def nodes(self) -> frozenset[NodeId]:
        out = set()
        for t in self.triplets:
            out.add(t.origin)
            out.add(t.target)
        return frozenset(out)

    def __contains__(self, triplet: object) -> bool:
        return triplet in self._set

    def __len__(self) -> int:
        return len(self.triplets)

    def outgoing(self, node: NodeId) -> list[Triplet]:
        return [t for t in self.triplets if t.origin == node]

    def is_connected(self) -> bool:
        """Weak connectivity over the undirected skeleton."""
        nodes = self.nodes
        if not nodes:
            return True
        adj: dict[NodeId, set[NodeId]] = {n: set() for n in nodes}
        for t in self.triplets:
            adj[t.origin].add(t.target)
            adj[t.target].add(t.origin)
        start = min(nodes, key=lambda n: n.canonical)
        seen = {start}
        stack = [start]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(nodes)


def canonicalize(graph: BehavioralGraph) -> BehavioralGraph:
    """Return the graph with triplets sorted by their canonical strings."""
    return BehavioralGraph(graph.env_id, tuple(sorted(graph.triplets, key=lambda t: t.key)))


def execute_plan(graph: BehavioralGraph, source: NodeId, plan: Sequence[Triplet]) -> NodeId:
    """Walk ``plan`` from ``source`` and return the node it ends on.

    Raises EmptyPlan, UnknownTriplet or BrokenChain for plans that cannot be
    executed on ``graph``.
    """
    if not plan:
        raise EmptyPlan("plan is empty")
    here = source
    for k, step in enumerate(plan):
        if step not in graph:
            raise UnknownTriplet(f"step {k}: {step} is not in graph {graph.env_id}")
        if step.origin != here:
            raise BrokenChain(f"step {k}: {step} starts at {step.origin}, robot is at {here}")
        here = step.target
    return here


def pad_or_truncate(
    graph: BehavioralGraph,
    gold_plan: Sequence[Triplet] = (),
    max_triplets: int = DEFAULT_MAX_TRIPLETS,
) -> tuple[list, list[int]]:
    """Fit the graph into exactly ``max_triplets`` slots.

    Small graphs are padded with PAD.  Large graphs keep every gold triplet
    and then the canonically earliest others.  Kept entries are emitted in
    canonical order so the gold positions carry no positional hint.
    """
    gold_unique = list(dict.fromkeys(gold_plan))
    if len(gold_unique) > max_triplets:
        raise PlanTooLong(f"gold plan has {len(gold_unique)} distinct triplets > {max_triplets}")
    for t in gold_unique:
        if t not in graph:
            raise UnknownTriplet(f"gold triplet {t} is not in graph {graph.env_id}")
    ordered = sorted(graph.triplets, key=lambda t: t.key)
    if len(ordered) > max_triplets:
        gold_set = set(gold_unique)
        rest = [t for t in ordered if t not in gold_set]
        kept = gold_set | set(rest[: max_triplets - len(gold_set)])
        ordered = [t for t in ordered if t in kept]
    entries: list = list(ordered) + [PAD] * (max_triplets - len(ordered))
    where = {t: i for i, t in enumerate(ordered)}
    return entries, [where[t] for t in gold_plan]


def graph_to_dict(graph: BehavioralGraph) -> dict:
    return {"env_id": graph.env_id, "triplets": [t.to_list() for t in canonicalize(graph).triplets]}


def serialize(graph: BehavioralGraph) -> str:
    return json.dumps(graph_to_dict(graph))


def graph_from_dict(doc: dict) -> BehavioralGraph:
    if not isinstance(doc, dict) or "triplets" not in doc:
        raise GraphError("graph document must be an object with a 'triplets' array")
    rows = doc["triplets"]
    if not isinstance(rows, list):
        raise GraphError("'triplets' must be an array")
    names = NodeNormalizer(
        name for row in rows if isinstance(row, (list, tuple)) for name in row[::2]
    )
    triplets = []
    for row in rows:
        if not isinstance(row, (list, tuple)) or len(row) != 3:
            raise GraphError(f"triplet must be a 3-element list, got {row!r}")
        triplets.append(Triplet(names(row[0]), Behavior.parse(row[1]), names(row[2])))
    return canonicalize(BehavioralGraph(str(doc.get("env_id", "")), tuple(triplets)))


def deserialize(text: str) -> BehavioralGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"malformed graph document: {exc}") from None
    return graph_from_dict(doc)


class NodeNormalizer:
    """Map node names from external data onto ``<type>-<index>`` ids.

    Names already in canonical form are kept.  Names with a known type
    prefix but a non-integer suffix (``kitchen-A``, ``hall``) get the next
    free index for that type, in first-appearance order.
    """

    def __init__(self, names: Iterable[str] = ()) -> None:
        self._assigned: dict[str, NodeId] = {}
        self._used: dict[LocationType, set[int]] = {}
        for name in names:
            m = _NODE_RE.match(name) if isinstance(name, str) else None
            if m is not None:
                self(name)

    def __call__(self, name: str) -> NodeId:
        if not isinstance(name, str):
            raise GraphError(f"node name must be a string, got {name!r}")
        if name in self._assigned:
            return self._assigned[name]
        m = _NODE_RE.match(name)
        if m is not None:
            node = NodeId(LocationType.parse(m.group(1)), int(m.group(2)))
        else:
            prefix = re.split(r"[-_ ]", name, maxsplit=1)[0].lower()
            kind = LocationType.parse(prefix)
            used = self._used.setdefault(kind, set())
            index = 1
            while index in used:
                index += 1
            node = NodeId(kind, index)
        self._used.setdefault(node.type, set()).add(node.index)
        self._assigned[name] = node
        return node


def nodes_by_name(graph: BehavioralGraph) -> dict[str, NodeId]:
    return {n.canonical: n for n in graph.nodes}


def parse_plan(rows: Iterable[Sequence[str]]) -> list[Triplet]:
    return [Triplet.from_list(r) for r in rows]
