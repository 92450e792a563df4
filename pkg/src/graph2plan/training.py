"""ADAM training loop with variational dropout and per-epoch validation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import build_model, save_checkpoint
from .features import INDEX_BUCKETS, Vocabulary, build_vocabulary, collate, load_word_vectors, make_example
from .graph import BehavioralGraph, NodeId, Triplet
from .metrics import MetricReport, evaluate_plans
from .model import Graph2Plan, NumericError, predict

log = logging.getLogger(__name__)

MAX_DECODE_STEPS = 32


def augment_sample(sample, rng: random.Random, relabel_prob: float, drop_max: float):
    """Copy of ``sample`` with node indices maybe reshuffled and some off-route triplets removed.

    With probability ``relabel_prob`` every node gets a fresh index drawn without
    replacement from the index buckets of its type. Each off-route triplet is then
    dropped with a rate drawn uniformly from [0, drop_max].
    """
    by_type: dict = {}
    for n in sorted(sample.graph.nodes):
        by_type.setdefault(n.type, []).append(n)
    relabel = rng.random() < relabel_prob
    mapping = {}
    for kind, nodes in by_type.items():
        pool = range(1, max(INDEX_BUCKETS, len(nodes) + 1))
        picks = rng.sample(pool, len(nodes)) if relabel else [n.index for n in nodes]
        for n, i in zip(nodes, picks):
            mapping[n] = NodeId(kind, i)
    move = lambda t: Triplet(mapping[t.origin], t.behavior, mapping[t.target])
    keep = set(sample.gold_plan)
    rate = rng.uniform(0.0, drop_max)
    kept = [t for t in sample.graph.triplets if t in keep or rng.random() >= rate]
    graph = BehavioralGraph(sample.graph.env_id, tuple(move(t) for t in kept))
    return dataclasses.replace(
        sample,
        graph=graph,
        source=mapping[sample.source],
        dest=mapping[sample.dest],
        gold_plan=tuple(move(t) for t in sample.gold_plan),
    )


@dataclass(frozen=True)
class TrainConfig:
    hidden_size: int = 100
    encoder_layers: int = 3
    epochs: int = 45
    max_triplets: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 32
    dropout_rate: float = 0.2
    seed: int = 0
    embedding_dim: int = 50
    grad_clip: float = 5.0
    # training-time augmentation, off by default
    relabel_prob: float = 0.0
    drop_max: float = 0.0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("dropout_rate", "drop_max"):
                if not 0.0 <= value < 1.0:
                    raise ValueError(f"{f.name} must be in [0, 1), got {value}")
            elif f.name == "relabel_prob":
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"relabel_prob must be in [0, 1], got {value}")
            elif f.name == "seed":
                if value < 0:
                    raise ValueError("seed must be non-negative")
            elif not value > 0:
                raise ValueError(f"{f.name} must be positive, got {value}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cast = {"int": int, "float": float}
        return cls(**{k: cast[known[k]](v) for k, v in doc.items()})

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
            raise ValueError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(doc)


@dataclass
class TrainState:
    model: Graph2Plan
    optimizer: torch.optim.Adam
    vocab: Vocabulary
    config: TrainConfig
    epoch: int = 0
    best_gm: float = -1.0
    best_epoch: int = 0
    best_checkpoint: Path | None = None
    history: list[dict] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    def moments(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        """First and second ADAM moments keyed by parameter name."""
        out = {}
        for name, p in self.model.named_parameters():
            st = self.optimizer.state.get(p, {})
            if "exp_avg" in st:
                out[name] = (st["exp_avg"], st["exp_avg_sq"])
        return out


def evaluate(model: Graph2Plan, samples: Sequence, vocab: Vocabulary, max_triplets: int) -> MetricReport:
    preds = predict(model, samples, vocab, max_triplets, MAX_DECODE_STEPS)
    return evaluate_plans(samples, [p.triplets for p in preds])


def train(
    train_samples: Sequence,
    valid_samples: Sequence,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    vocab: Vocabulary | None = None,
    word_vectors_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainState:
    """Mini-batch ADAM on the pointer loss for ``config.epochs`` epochs.

    Validation metrics are computed after every epoch; with ``out_dir`` the
    best-GM model goes to ``best.pt`` and one JSON line per epoch is appended
    to ``train_log.jsonl``.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    if not valid_samples:
        raise ValueError("validation split is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    vocab = vocab or build_vocabulary(train_samples)
    vectors = None
    if word_vectors_path is not None:
        vectors, found = load_word_vectors(word_vectors_path, vocab, config.embedding_dim)
        log.info("pretrained vectors for %d of %d words", found, len(vocab))
    model = build_model(config, len(vocab), vectors)
    model.generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    state = TrainState(model, optimizer, vocab, config)
    examples = [make_example(s, vocab, config.max_triplets) for s in train_samples]
    augment_rng = random.Random(config.seed)
    augment = config.relabel_prob > 0 or config.drop_max > 0

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("")

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(examples))
        if augment:
            examples = [
                make_example(
                    augment_sample(s, augment_rng, config.relabel_prob, config.drop_max),
                    vocab,
                    config.max_triplets,
                )
                for s in train_samples
            ]
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = collate([examples[i] for i in order[start : start + config.batch_size]])
            optimizer.zero_grad()
            try:
                loss = model.loss(batch)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from None
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
        train_loss = total / count
        if not math.isfinite(train_loss):
            raise NumericError(f"epoch {epoch}: training loss is {train_loss}")

        report = evaluate(model, valid_samples, vocab, config.max_triplets)
        row = {"epoch": epoch, "train_loss": train_loss, **report.to_dict("valid")}
        del row["split"], row["n"]
        state.history.append(row)
        state.epoch = epoch
        log.info(
            "epoch %d loss %.4f EM %.2f F1 %.2f ED %.3f GM %.2f",
            epoch, train_loss, row["EM"], row["F1"], row["ED"], row["GM"],
        )
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
        if report.gm > state.best_gm:
            state.best_gm = report.gm
            state.best_epoch = epoch
            if out is not None:
                state.best_checkpoint = out / "best.pt"
                save_checkpoint(state.best_checkpoint, model, vocab, config, {"epoch": epoch, **row})
        if on_epoch is not None:
            on_epoch(row)

    state.rng_state = {
        "numpy": rng.bit_generator.state,
        "torch": torch.get_rng_state(),
        "dropout": model.generator.get_state(),
    }
    if out is not None:
        save_checkpoint(out / "last.pt", model, vocab, config, {"epoch": state.epoch})
    return state


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
