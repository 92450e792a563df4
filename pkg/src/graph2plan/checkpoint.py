"""Single-file model archives: named tensors, shapes, vocabulary, config."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import torch

from .features import Vocabulary
from .model import Graph2Plan

FORMAT = "graph2plan-checkpoint/1"


class CheckpointError(ValueError):
    pass


def config_hash(config) -> str:
    """Hash of the model-shaping and training fields, order independent."""
    doc = config if isinstance(config, dict) else asdict(config)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: Graph2Plan, vocab: Vocabulary, config, extra: dict | None = None) -> None:
    path = Path(path)
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
    archive = {
        "format": FORMAT,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "vocab": list(vocab.itos),
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
        "tensors": tensors,
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(archive, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path: str | Path):
    """Return (model, vocab, config, extra); the model is in eval mode."""
    from .training import TrainConfig

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(archive, dict) or archive.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    config = TrainConfig(**archive["config"])
    if config_hash(config) != archive["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match stored config")
    vocab = Vocabulary(archive["vocab"][2:])
    if vocab.itos != archive["vocab"]:
        raise CheckpointError(f"{path}: vocabulary is malformed")
    model = build_model(config, len(vocab))
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    tensors = archive["tensors"]
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise CheckpointError(f"{path}: parameter names differ: {missing[:5]}")
    for name, shape in expected.items():
        if list(tensors[name].shape) != shape or archive["shapes"][name] != shape:
            raise CheckpointError(f"{path}: {name} has shape {list(tensors[name].shape)}, expected {shape}")
    model.load_state_dict(tensors)
    model.eval()
    return model, vocab, config, archive.get("extra", {})


def build_model(config, vocab_size: int, word_vectors=None) -> Graph2Plan:
    return Graph2Plan(
        vocab_size=vocab_size,
        hidden_size=config.hidden_size,
        encoder_layers=config.encoder_layers,
        embedding_dim=config.embedding_dim,
        dropout=config.dropout_rate,
        word_vectors=word_vectors,
    )
