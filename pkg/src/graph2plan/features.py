"""Vocabulary and tensor featurization of navigation samples."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .graph import PAD, Behavior, LocationType, NodeId, Triplet, pad_or_truncate

log = logging.getLogger(__name__)

PAD_WORD = "<pad>"
UNK_WORD = "<unk>"
INDEX_BUCKETS = 32

LOCATIONS = list(LocationType)
BEHAVIORS = list(Behavior)
LOCATION_IDS = {t: i for i, t in enumerate(LOCATIONS)}
BEHAVIOR_IDS = {b: i for i, b in enumerate(BEHAVIORS)}


class Vocabulary:
    pad_id = 0
    unk_id = 1

    def __init__(self, words: Iterable[str] = ()) -> None:
        self.itos = [PAD_WORD, UNK_WORD]
        for w in words:
            if w not in (PAD_WORD, UNK_WORD):
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def lookup(self, word: str) -> int:
        return self.stoi.get(word, self.unk_id)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.lookup(w) for w in tokens]

    def unknown(self, tokens: Sequence[str]) -> list[str]:
        return [w for w in tokens if w not in self.stoi]


def build_vocabulary(samples, min_count: int = 1) -> Vocabulary:
    """Words sorted by descending frequency, then alphabetically."""
    counts = Counter(w for s in samples for w in s.instruction)
    words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocabulary(words)


def load_word_vectors(path: str | Path, vocab: Vocabulary, dim: int) -> tuple[np.ndarray, int]:
    """Read ``word v1 ... vd`` lines into an embedding matrix for ``vocab``.

    Words missing from the file keep a small random row (seeded by the
    vocabulary size so the result is reproducible); PAD stays zero.
    Returns the matrix and the number of vocabulary words found.
    """
    rng = np.random.default_rng(len(vocab))
    table = rng.normal(0.0, 0.1, size=(len(vocab), dim))
    found = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split()
            if len(parts) != dim + 1 or parts[0] not in vocab:
                continue
            table[vocab.stoi[parts[0]]] = np.asarray(parts[1:], dtype=np.float64)
            found += 1
    table[vocab.pad_id] = 0.0
    return table, found


def node_features(node: NodeId) -> tuple[int, int]:
    return LOCATION_IDS[node.type], min(node.index, INDEX_BUCKETS - 1)


def triplet_features(entry) -> tuple[int, int, int, int, int]:
    if entry is PAD:
        return (0, 0, 0, 0, 0)
    t: Triplet = entry
    return (*node_features(t.origin), BEHAVIOR_IDS[t.behavior], *node_features(t.target))


@dataclass
class Example:
    """One sample laid out for the network."""

    entries: list                   # max_triplets triplets-or-PAD
    triplets: np.ndarray            # (N, 5) int
    graph_mask: np.ndarray          # (N,) bool
    words: np.ndarray               # (m,) int
    query: np.ndarray               # (4,) int: source type/bucket, dest type/bucket
    targets: np.ndarray             # (T+1,) int, gold positions then STOP (== N)


def make_example(sample, vocab: Vocabulary, max_triplets: int, with_gold: bool = True) -> Example:
    gold = sample.gold_plan if with_gold else ()
    entries, positions = pad_or_truncate(sample.graph, gold, max_triplets)
    if not sample.instruction:
        raise ValueError("empty instruction")
    return Example(
        entries=entries,
        triplets=np.array([triplet_features(e) for e in entries], dtype=np.int64).reshape(-1, 5),
        graph_mask=np.array([e is not PAD for e in entries], dtype=bool),
        words=np.array(vocab.encode(sample.instruction), dtype=np.int64),
        query=np.array([*node_features(sample.source), *node_features(sample.dest)], dtype=np.int64),
        targets=np.array(list(positions) + [max_triplets], dtype=np.int64),
    )


@dataclass
class Batch:
    triplets: torch.Tensor          # (B, N, 5)
    graph_mask: torch.Tensor        # (B, N)
    graph_lengths: torch.Tensor     # (B,)
    words: torch.Tensor             # (B, M)
    word_mask: torch.Tensor         # (B, M)
    word_lengths: torch.Tensor      # (B,)
    query: torch.Tensor             # (B, 4)
    targets: torch.Tensor           # (B, T)
    target_mask: torch.Tensor       # (B, T)
    entries: list

    def __len__(self) -> int:
        return self.triplets.shape[0]

    @property
    def stop_index(self) -> int:
        return self.triplets.shape[1]


def collate(examples: Sequence[Example]) -> Batch:
    n = {len(e.entries) for e in examples}
    if len(n) != 1:
        raise ValueError(f"examples padded to different lengths: {sorted(n)}")
    m = max(len(e.words) for e in examples)
    t = max(len(e.targets) for e in examples)
    words = np.zeros((len(examples), m), dtype=np.int64)
    targets = np.zeros((len(examples), t), dtype=np.int64)
    target_mask = np.zeros((len(examples), t), dtype=bool)
    for i, e in enumerate(examples):
        words[i, : len(e.words)] = e.words
        targets[i, : len(e.targets)] = e.targets
        target_mask[i, : len(e.targets)] = True
    graph_mask = torch.from_numpy(np.stack([e.graph_mask for e in examples]))
    word_lengths = torch.tensor([len(e.words) for e in examples])
    return Batch(
        triplets=torch.from_numpy(np.stack([e.triplets for e in examples])),
        graph_mask=graph_mask,
        graph_lengths=graph_mask.sum(1),
        words=torch.from_numpy(words),
        word_mask=torch.arange(m)[None, :] < word_lengths[:, None],
        word_lengths=word_lengths,
        query=torch.from_numpy(np.stack([e.query for e in examples])),
        targets=torch.from_numpy(targets),
        target_mask=torch.from_numpy(target_mask),
        entries=[e.entries for e in examples],
    )
