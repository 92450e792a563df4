"""Plan evaluation: exact match, F1, edit distance and goal match."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

from .graph import BehavioralGraph, NodeId, PlanError, Triplet, execute_plan


def exact_match(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> int:
    return int(list(pred) == list(gold))


def f1_score(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> float:
    """Harmonic mean of precision and recall on token multisets."""
    if not pred and not gold:
        return 1.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    # 2pr/(p+r) reduced to one integer division, so the result is correctly rounded
    return 2 * overlap / (len(pred) + len(gold))


def edit_distance(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> int:
    """Unit-cost Levenshtein distance, two-row dynamic programme."""
    pred, gold = list(pred), list(gold)
    prev = list(range(len(gold) + 1))
    for i, p in enumerate(pred, 1):
        cur = [i] + [0] * len(gold)
        for j, g in enumerate(gold, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (p != g))
        prev = cur
    return prev[-1]


def goal_match(graph: BehavioralGraph, source: NodeId, dest: NodeId, pred_triplets: Sequence[Triplet]) -> int:
    try:
        return int(execute_plan(graph, source, pred_triplets) == dest)
    except PlanError:
        return 0


@dataclass
class MetricReport:
    em: float
    f1: float
    ed: float
    gm: float
    per_sample: list[tuple[int, float, int, int]] = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return len(self.per_sample)

    def to_dict(self, split: str, per_sample: bool = False) -> dict:
        """Report document; EM, F1 and GM in percent, ED as a mean count."""
        doc = {
            "split": split,
            "n": self.n,
            "EM": 100.0 * self.em,
            "F1": 100.0 * self.f1,
            "ED": self.ed,
            "GM": 100.0 * self.gm,
        }
        if per_sample:
            doc["per_sample"] = [
                {"em": em, "f1": f1, "ed": ed, "gm": gm} for em, f1, ed, gm in self.per_sample
            ]
        return doc


def score_sample(sample, pred_triplets: Sequence[Triplet]) -> tuple[int, float, int, int]:
    pred = [t.behavior.code for t in pred_triplets]
    gold = [t.behavior.code for t in sample.gold_plan]
    return (
        exact_match(pred, gold),
        f1_score(pred, gold),
        edit_distance(pred, gold),
        goal_match(sample.graph, sample.source, sample.dest, pred_triplets),
    )


def aggregate(rows: Sequence[tuple[int, float, int, int]]) -> MetricReport:
    if not rows:
        return MetricReport(0.0, 0.0, 0.0, 0.0, [])
    n = len(rows)
    cols = list(zip(*rows))
    return MetricReport(
        em=sum(cols[0]) / n,
        f1=sum(cols[1]) / n,
        ed=sum(cols[2]) / n,
        gm=sum(cols[3]) / n,
        per_sample=list(rows),
    )


def evaluate_plans(samples, predicted: Sequence[Sequence[Triplet]]) -> MetricReport:
    if len(samples) != len(predicted):
        raise ValueError(f"{len(samples)} samples but {len(predicted)} predictions")
    return aggregate([score_sample(s, p) for s, p in zip(samples, predicted)])
