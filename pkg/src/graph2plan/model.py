"""Gated self-matching pointer network over behavioral-graph triplets.

Pipeline per sample:

* triplets -> stacked BiGRU -> graph encoding ``u_P``
* words -> stacked BiGRU -> ``e_Q``; (source, dest) -> ReLU MLP, prepended
  as row 0 to give ``u_Q``
* gated attention-based GRU over graph positions, attending to ``u_Q`` -> ``v_P``
* gated self-matching attention + BiGRU -> ``h_P``
* GRU pointer decoder initialised from pooled ``u_Q``; each step points at
  a graph position or at a learned STOP key appended after the last slot
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .features import (
    BEHAVIORS,
    INDEX_BUCKETS,
    LOCATIONS,
    Batch,
    collate,
    make_example,
    triplet_features,
)
from .graph import PAD, Behavior, Triplet

FEATURE_DIM = 16


class NumericError(FloatingPointError):
    pass


def apply_variational_dropout(
    x: torch.Tensor,
    rate: float,
    generator: torch.Generator | None = None,
    training: bool = True,
    observer: Callable[[torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Dropout with one keep-mask per sequence, shared by all timesteps.

    ``x`` is (batch, time, features) or (batch, features); in the latter case
    the caller reuses the returned mask itself across steps via ``dropout_mask``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = dropout_mask((x.shape[0], x.shape[-1]), rate, x.dtype, generator)
    if observer is not None:
        observer(mask)
    return x * (mask.unsqueeze(1) if x.dim() == 3 else mask)


def dropout_mask(shape, rate: float, dtype, generator: torch.Generator | None = None) -> torch.Tensor:
    keep = torch.rand(shape, generator=generator, dtype=torch.float64) >= rate
    return keep.to(dtype) / (1.0 - rate)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=dim)


def masked_log_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(scores.masked_fill(~mask, float("-inf")), dim=dim)


def sequence_nll(log_probs: torch.Tensor, targets: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Per-sample sum of ``-log p[target]`` over valid steps.

    ``log_probs`` is (B, T, K); returns a (B,) tensor.
    """
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked.masked_fill(~target_mask, 0.0)).sum(1)


class StackedBiGRU(nn.Module):
    """Bidirectional GRU layers with variational dropout on each layer input."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int):
        super().__init__()
        sizes = [input_size] + [2 * hidden_size] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.GRU(s, hidden_size, batch_first=True, bidirectional=True) for s in sizes
        )

    def forward(self, x, lengths, dropout=0.0, generator=None, observer=None):
        total = x.shape[1]
        for layer in self.layers:
            x = apply_variational_dropout(x, dropout, generator, self.training, observer)
            x = run_packed(layer, x, lengths, total)
        return x


def run_packed(rnn: nn.GRU, x: torch.Tensor, lengths: torch.Tensor, total: int) -> torch.Tensor:
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = rnn(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=total)
    return out


@dataclass
class EncodedSample:
    u_P: torch.Tensor        # (B, N, 2h)
    e_Q: torch.Tensor        # (B, M, 2h)
    u_Q: torch.Tensor        # (B, M+1, 2h)
    graph_mask: torch.Tensor  # (B, N)
    instr_mask: torch.Tensor  # (B, M+1)


@dataclass
class AttentionOutput:
    out: torch.Tensor
    attention: torch.Tensor
    gates: torch.Tensor
    context: torch.Tensor


@dataclass
class PlanPrediction:
    positions: list[int]
    triplets: list[Triplet]
    behaviors: list[Behavior]
    attention_trace: list[np.ndarray] = field(repr=False, default_factory=list)
    truncated: bool = False
    stop_index: int = -1


class Graph2Plan(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        hidden_size: int = 100,
        encoder_layers: int = 3,
        embedding_dim: int = 50,
        dropout: float = 0.2,
        word_vectors: np.ndarray | None = None,
    ):
        super().__init__()
        h = hidden_size
        self.hidden_size = h
        self.dropout = dropout
        self.generator: torch.Generator | None = None
        self.dropout_observer: Callable[[torch.Tensor], None] | None = None

        self.word_emb = nn.Embedding(vocab_size, embedding_dim, padding_idx=0)
        nn.init.normal_(self.word_emb.weight, 0.0, 0.1)
        if word_vectors is not None:
            self.word_emb.weight.data.copy_(torch.as_tensor(word_vectors))
        with torch.no_grad():
            self.word_emb.weight[0].zero_()
        self.loc_emb = nn.Embedding(len(LOCATIONS), FEATURE_DIM)
        self.idx_emb = nn.Embedding(INDEX_BUCKETS, FEATURE_DIM)
        self.beh_emb = nn.Embedding(len(BEHAVIORS), FEATURE_DIM)

        self.graph_encoder = StackedBiGRU(5 * FEATURE_DIM, h, encoder_layers)
        self.instr_encoder = StackedBiGRU(embedding_dim, h, encoder_layers)
        self.query_mlp = nn.Sequential(
            nn.Linear(4 * FEATURE_DIM, 2 * h), nn.ReLU(), nn.Linear(2 * h, 2 * h)
        )

        # gated attention-based recurrent network
        self.W_uQ = nn.Linear(2 * h, h, bias=False)
        self.W_uP = nn.Linear(2 * h, h, bias=False)
        self.W_vP = nn.Linear(h, h, bias=False)
        self.v = nn.Linear(h, 1, bias=False)
        self.W_g = nn.Linear(4 * h, 4 * h, bias=False)
        self.match_cell = nn.GRUCell(4 * h, h)

        # self-matching attention
        self.W_self = nn.Linear(h, h, bias=False)
        self.W_self_t = nn.Linear(h, h, bias=False)
        self.v_self = nn.Linear(h, 1, bias=False)
        self.W_g_self = nn.Linear(2 * h, 2 * h, bias=False)
        self.self_rnn = nn.GRU(2 * h, h, batch_first=True, bidirectional=True)

        # pointer network
        self.W_hP = nn.Linear(2 * h, h, bias=False)
        self.W_ha = nn.Linear(2 * h, h, bias=False)
        self.v_ptr = nn.Linear(h, 1, bias=False)
        self.stop_key = nn.Parameter(torch.randn(2 * h) * 0.1)
        self.init_mlp = nn.Sequential(nn.Linear(2 * h, 2 * h), nn.Tanh(), nn.Linear(2 * h, 2 * h))
        self.decoder_cell = nn.GRUCell(2 * h, 2 * h)

    # -- embedding / encoding ------------------------------------------------

    def _drop(self, x):
        return apply_variational_dropout(
            x, self.dropout, self.generator, self.training, self.dropout_observer
        )

    def embed_triplets(self, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Concatenate [origin type; origin index; behavior; target type; target index]."""
        parts = [
            self.loc_emb(feats[..., 0]),
            self.idx_emb(feats[..., 1]),
            self.beh_emb(feats[..., 2]),
            self.loc_emb(feats[..., 3]),
            self.idx_emb(feats[..., 4]),
        ]
        return torch.cat(parts, -1) * mask.unsqueeze(-1).to(parts[0].dtype)

    def embed_triplet(self, entry) -> torch.Tensor:
        feats = torch.tensor([triplet_features(entry)])
        mask = torch.tensor([entry is not PAD])
        return self.embed_triplets(feats, mask)[0]

    def encode(self, batch: Batch) -> EncodedSample:
        mask = batch.graph_mask
        trip = self.embed_triplets(batch.triplets, mask)
        u_P = self.graph_encoder(
            trip, batch.graph_lengths, self.dropout, self.generator, self.dropout_observer
        )
        if (batch.word_lengths <= 0).any():
            raise ValueError("empty instruction")
        words = self.word_emb(batch.words)
        e_Q = self.instr_encoder(
            words, batch.word_lengths, self.dropout, self.generator, self.dropout_observer
        )
        q = batch.query
        sd = torch.cat(
            [self.loc_emb(q[:, 0]), self.idx_emb(q[:, 1]), self.loc_emb(q[:, 2]), self.idx_emb(q[:, 3])],
            -1,
        )
        u_Q = torch.cat([self.query_mlp(sd).unsqueeze(1), e_Q], 1)
        instr_mask = torch.cat([torch.ones_like(batch.word_mask[:, :1]), batch.word_mask], 1)
        return EncodedSample(u_P, e_Q, u_Q, mask, instr_mask)

    # -- attention layers ----------------------------------------------------

    def gated_attention(self, u_P, u_Q, graph_mask, instr_mask) -> AttentionOutput:
        B, N, _ = u_P.shape
        keys = self.W_uQ(u_Q)                      # (B, M+1, h)
        queries = self.W_uP(u_P)                   # (B, N, h)
        v = u_P.new_zeros(B, self.hidden_size)
        drop = None
        if self.training and self.dropout > 0:
            drop = dropout_mask((B, 4 * self.hidden_size), self.dropout, u_P.dtype, self.generator)
            if self.dropout_observer is not None:
                self.dropout_observer(drop)
        outs, attns, gates, ctxs = [], [], [], []
        for t in range(N):
            s = self.v(torch.tanh(keys + (queries[:, t] + self.W_vP(v)).unsqueeze(1))).squeeze(-1)
            a = masked_softmax(s, instr_mask)
            c = torch.bmm(a.unsqueeze(1), u_Q).squeeze(1)
            x = torch.cat([u_P[:, t], c], -1)
            g = torch.sigmoid(self.W_g(x))
            x = g * x
            if drop is not None:
                x = x * drop
            v_new = self.match_cell(x, v)
            keep = graph_mask[:, t].unsqueeze(-1)
            v = torch.where(keep, v_new, v)
            outs.append(v_new * keep.to(v_new.dtype))
            attns.append(a)
            gates.append(g)
            ctxs.append(c)
        return AttentionOutput(
            torch.stack(outs, 1), torch.stack(attns, 1), torch.stack(gates, 1), torch.stack(ctxs, 1)
        )

    def self_matching(self, v_P, graph_mask) -> AttentionOutput:
        N = v_P.shape[1]
        keys = self.W_self(v_P)                    # (B, N, h) over j
        queries = self.W_self_t(v_P)               # (B, N, h) over t
        s = self.v_self(torch.tanh(keys.unsqueeze(1) + queries.unsqueeze(2))).squeeze(-1)
        a = masked_softmax(s, graph_mask.unsqueeze(1))   # (B, N_t, N_j)
        c = torch.bmm(a, v_P)
        x = torch.cat([v_P, c], -1)
        g = torch.sigmoid(self.W_g_self(x))
        x = self._drop(g * x)
        h_P = run_packed(self.self_rnn, x, graph_mask.sum(1), N)
        return AttentionOutput(h_P, a, g, c)

    # -- pointer -------------------------------------------------------------

    def pointer_keys(self, h_P, graph_mask):
        B = h_P.shape[0]
        keys = torch.cat([h_P, self.stop_key.to(h_P.dtype).expand(B, 1, -1)], 1)
        key_mask = torch.cat([graph_mask, torch.ones_like(graph_mask[:, :1])], 1)
        return keys, key_mask

    def initial_state(self, u_Q, instr_mask):
        w = instr_mask.unsqueeze(-1).to(u_Q.dtype)
        pooled = (u_Q * w).sum(1) / w.sum(1)
        # squashed into the GRU state range so the first step starts unsaturated
        return torch.tanh(self.init_mlp(pooled))

    def pointer_scores(self, proj_keys, key_mask, h):
        s = self.v_ptr(torch.tanh(proj_keys + self.W_ha(h).unsqueeze(1))).squeeze(-1)
        return s.masked_fill(~key_mask, float("-inf"))

    def pointer_logits(self, h_P, u_Q, graph_mask, instr_mask, targets):
        """Teacher-forced step scores, (B, T, N+1); the gold pointer feeds each next step."""
        keys, key_mask = self.pointer_keys(h_P, graph_mask)
        proj = self.W_hP(keys)
        h = self.initial_state(u_Q, instr_mask)
        rows = torch.arange(keys.shape[0])
        out = []
        for t in range(targets.shape[1]):
            out.append(self.pointer_scores(proj, key_mask, h))
            h = self.decoder_cell(keys[rows, targets[:, t]], h)
        return torch.stack(out, 1)

    # -- whole model ---------------------------------------------------------

    def forward_states(self, batch: Batch):
        enc = self.encode(batch)
        v_P = self.gated_attention(enc.u_P, enc.u_Q, enc.graph_mask, enc.instr_mask).out
        h_P = self.self_matching(v_P, enc.graph_mask).out
        return enc, h_P

    def loss(self, batch: Batch, reduction: str = "mean") -> torch.Tensor:
        enc, h_P = self.forward_states(batch)
        logits = self.pointer_logits(h_P, enc.u_Q, enc.graph_mask, enc.instr_mask, batch.targets)
        per_sample = sequence_nll(F.log_softmax(logits, -1), batch.targets, batch.target_mask)
        if not torch.isfinite(per_sample).all():
            bad = torch.nonzero(~torch.isfinite(per_sample)).flatten().tolist()
            raise NumericError(f"non-finite loss for batch rows {bad}")
        return per_sample.mean() if reduction == "mean" else per_sample

    @torch.no_grad()
    def decode(self, batch: Batch, max_steps: int = 32) -> list[PlanPrediction]:
        """Greedy pointer decoding; ties go to the smallest index."""
        enc, h_P = self.forward_states(batch)
        keys, key_mask = self.pointer_keys(h_P, enc.graph_mask)
        proj = self.W_hP(keys)
        h = self.initial_state(enc.u_Q, enc.instr_mask)
        stop = batch.stop_index
        B = len(batch)
        positions: list[list[int]] = [[] for _ in range(B)]
        traces: list[list[np.ndarray]] = [[] for _ in range(B)]
        done = [False] * B
        for _ in range(max_steps):
            a = torch.softmax(self.pointer_scores(proj, key_mask, h), -1)
            picks = a.argmax(-1).tolist()
            for i, p in enumerate(picks):
                if not done[i]:
                    positions[i].append(p)
                    traces[i].append(a[i].cpu().numpy())
                    done[i] = p == stop
            if all(done):
                break
            h = self.decoder_cell(torch.bmm(a.unsqueeze(1), keys).squeeze(1), h)
        out = []
        for i in range(B):
            pos = positions[i]
            chosen = [batch.entries[i][p] for p in pos if p != stop]
            out.append(
                PlanPrediction(
                    positions=pos,
                    triplets=chosen,
                    behaviors=[t.behavior for t in chosen],
                    attention_trace=traces[i],
                    truncated=not done[i],
                    stop_index=stop,
                )
            )
        return out


def predict(
    model: Graph2Plan,
    samples: Sequence,
    vocab,
    max_triplets: int,
    max_steps: int = 32,
    batch_size: int = 64,
) -> list[PlanPrediction]:
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            batch = collate([make_example(s, vocab, max_triplets, with_gold=False) for s in chunk])
            out.extend(model.decode(batch, max_steps))
    finally:
        model.train(was_training)
    return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
