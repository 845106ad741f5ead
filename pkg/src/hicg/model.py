"""The HICG network: item embeddings, gated propagation over typed session
graphs, intra/inter-behavior attention, long-term preference and next-item
scoring.

All weights use the column-vector convention ``W @ x`` (applied to batched
row vectors as ``x @ W.T``), except the per-relation message projections
which act on the right of the aggregated neighbour states, ``(A @ H) @ W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import ConfigError
from .data import TrainingSample
from .graph import HeteroSessionGraph, build_session_graph

UPDATE, RESET, CANDIDATE = 0, 1, 2
MASKED_SCORE = -1e30


@dataclass
class GraphBatch:
    """Padded tensors for a batch of session graphs.

    ``adj`` has shape ``(B, 2R, N, N)`` with channel ``2 * relation + direction``.
    """

    node_items: torch.Tensor  # (B, N) long
    node_mask: torch.Tensor  # (B, N) bool
    adj: torch.Tensor  # (B, 2R, N, N)
    beh_node: torch.Tensor  # (B, T) long
    beh_type: torch.Tensor  # (B, T) long
    beh_mask: torch.Tensor  # (B, T) bool
    last: torch.Tensor  # (B,) long

    def __len__(self) -> int:
        return self.node_items.shape[0]


def collate(graphs: Sequence[HeteroSessionGraph], dtype=torch.float32) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot collate an empty batch")
    b = len(graphs)
    n = max(g.n_nodes for g in graphs)
    t = max(len(g.behavior_to_node) for g in graphs)
    r2 = 2 * graphs[0].n_relations
    node_items = np.zeros((b, n), dtype=np.int64)
    node_mask = np.zeros((b, n), dtype=bool)
    adj = np.zeros((b, r2, n, n))
    beh_node = np.zeros((b, t), dtype=np.int64)
    beh_type = np.zeros((b, t), dtype=np.int64)
    beh_mask = np.zeros((b, t), dtype=bool)
    last = np.zeros(b, dtype=np.int64)
    for k, g in enumerate(graphs):
        if 2 * g.n_relations != r2:
            raise ValueError("graphs in a batch must share the behavior-type count")
        nn_, tt = g.n_nodes, len(g.behavior_to_node)
        node_items[k, :nn_] = g.nodes
        node_mask[k, :nn_] = True
        adj[k, :, :nn_, :nn_] = g.adjacency_tensor().reshape(r2, nn_, nn_)
        beh_node[k, :tt] = g.behavior_to_node
        beh_type[k, :tt] = g.behavior_types
        beh_mask[k, :tt] = True
        last[k] = tt - 1
    return GraphBatch(
        torch.from_numpy(node_items),
        torch.from_numpy(node_mask),
        torch.from_numpy(adj).to(dtype),
        torch.from_numpy(beh_node),
        torch.from_numpy(beh_type),
        torch.from_numpy(beh_mask),
        torch.from_numpy(last),
    )


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax restricted to ``mask``; masked entries get exactly zero and a
    fully masked group yields all zeros."""
    scores = scores.masked_fill(~mask, MASKED_SCORE)
    scores = scores - scores.max(dim=dim, keepdim=True).values.detach()
    w = torch.exp(scores) * mask
    total = w.sum(dim=dim, keepdim=True)
    return w / torch.where(total > 0, total, torch.ones_like(total))


class HICG(nn.Module):
    """Session recommender over heterogeneous behavior graphs.

    Args:
        n_items: catalogue size.
        n_types: number of behavior types; relations are ordered type pairs.
        dim: embedding and hidden width.
        steps: gated propagation steps.
        dropout: rate applied to node states after propagation.
    """

    def __init__(self, n_items: int, n_types: int, dim: int = 100, steps: int = 1, dropout: float = 0.2):
        super().__init__()
        if steps < 1:
            raise ConfigError(f"propagation steps must be >= 1, got {steps}")
        if n_items < 1 or n_types < 1 or dim < 1:
            raise ConfigError("n_items, n_types and dim must be positive")
        self.n_items, self.n_types, self.dim, self.steps = n_items, n_types, dim, steps
        self.n_relations = n_types * n_types
        d, r2 = dim, 2 * n_types * n_types
        msg = r2 * d

        def p(*shape):
            return nn.Parameter(torch.empty(*shape))

        self.embedding = p(n_items, d)
        self.rel_weight = p(r2, d, d)
        self.rel_bias = p(r2, d)
        self.gate_input = p(3, d, msg)
        self.gate_recurrent = p(3, d, d)
        self.gate_bias = p(3, d)
        self.intra_w1 = p(n_types, d, d)
        self.intra_w2 = p(n_types, d, d)
        self.intra_v = p(n_types, d)
        self.intra_b = p(n_types, d)
        self.inter_w3 = p(d, d)
        self.inter_w4 = p(d, d)
        self.inter_v = p(d)
        self.inter_b = p(d)
        self.long_w5 = p(d, d)
        self.long_w6 = p(d, d)
        self.long_v = p(d)
        self.long_b = p(d)
        self.out_proj = p(d, 2 * d)
        self.dropout = nn.Dropout(dropout)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.dim)
        with torch.no_grad():
            for w in self.parameters():
                w.uniform_(-bound, bound, generator=generator)

    def config(self) -> dict:
        return {
            "n_items": self.n_items,
            "n_types": self.n_types,
            "dim": self.dim,
            "steps": self.steps,
            "dropout": self.dropout.p,
        }

    # -- components -------------------------------------------------------

    def lookup_embeddings(self, items: torch.Tensor) -> torch.Tensor:
        items = torch.as_tensor(items, dtype=torch.long)
        if items.numel() and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError(f"item index out of range [0, {self.n_items})")
        return self.embedding[items]

    def ggnn_propagate(self, h: torch.Tensor, adj: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        """Gated propagation of node states ``h`` (B, N, d)."""
        steps = self.steps if steps is None else steps
        if steps < 1:
            raise ConfigError(f"propagation steps must be >= 1, got {steps}")
        b, n, d = h.shape
        for _ in range(steps):
            # (B, 2R, N, d): aggregate, then project per relation/direction
            agg = torch.matmul(adj, h.unsqueeze(1))
            msg = torch.einsum("bknd,kde->bkne", agg, self.rel_weight) + self.rel_bias[None, :, None, :]
            a = msg.permute(0, 2, 1, 3).reshape(b, n, -1)
            gi = torch.einsum("bnm,gdm->gbnd", a, self.gate_input)
            gh = torch.einsum("bnd,ged->gbne", h, self.gate_recurrent)
            z = torch.sigmoid(gi[UPDATE] + gh[UPDATE] + self.gate_bias[UPDATE])
            r = torch.sigmoid(gi[RESET] + gh[RESET] + self.gate_bias[RESET])
            cand = torch.tanh(gi[CANDIDATE] + (r * h) @ self.gate_recurrent[CANDIDATE].T + self.gate_bias[CANDIDATE])
            h = (1 - z) * h + z * cand
        return h

    def intra_behavior_attention(self, hb, anchor, beh_type, beh_mask):
        """Per-type attention over behavior states ``hb`` (B, T, d).

        Returns weights (B, Y, T), interests (B, Y, d) and the presence mask
        (B, Y).
        """
        types = torch.arange(self.n_types, device=hb.device)
        mask = beh_mask[:, None, :] & (beh_type[:, None, :] == types[None, :, None])
        pre = (
            torch.einsum("bd,yed->bye", anchor, self.intra_w1)[:, :, None, :]
            + torch.einsum("btd,yed->byte", hb, self.intra_w2)
            + self.intra_b[None, :, None, :]
        )
        scores = torch.einsum("byte,ye->byt", torch.sigmoid(pre), self.intra_v)
        alpha = masked_softmax(scores, mask)
        q = torch.einsum("byt,btd->byd", alpha, hb)
        return alpha, q, mask.any(dim=-1)

    def inter_behavior_attention(self, q, present, anchor):
        pre = (anchor @ self.inter_w3.T)[:, None, :] + q @ self.inter_w4.T + self.inter_b
        scores = torch.sigmoid(pre) @ self.inter_v
        alpha = masked_softmax(scores, present)
        return alpha, torch.einsum("by,byd->bd", alpha, q)

    def long_term_preference(self, hb, anchor, beh_mask):
        pre = (anchor @ self.long_w5.T)[:, None, :] + hb @ self.long_w6.T + self.long_b
        scores = torch.sigmoid(pre) @ self.long_v
        alpha = masked_softmax(scores, beh_mask)
        return alpha, torch.einsum("bt,btd->bd", alpha, hb)

    def session_representation(self, c, p):
        return torch.cat([c, p], dim=-1) @ self.out_proj.T

    def score_items(self, z):
        """Logits over the full catalogue; softmax gives the score vector."""
        return z @ self.embedding.T

    # -- composition ------------------------------------------------------

    def represent(self, batch: GraphBatch) -> dict:
        h0 = self.embedding[batch.node_items]
        h = self.ggnn_propagate(h0, batch.adj)
        h = self.dropout(h)
        hb = torch.gather(h, 1, batch.beh_node[:, :, None].expand(-1, -1, self.dim))
        anchor = hb[torch.arange(len(batch)), batch.last]
        intra_alpha, q, present = self.intra_behavior_attention(hb, anchor, batch.beh_type, batch.beh_mask)
        inter_alpha, c = self.inter_behavior_attention(q, present, anchor)
        long_alpha, p = self.long_term_preference(hb, anchor, batch.beh_mask)
        c = torch.where(present.any(dim=1, keepdim=True), c, p)
        z = self.session_representation(c, p)
        return {
            "node_states": h,
            "behavior_states": hb,
            "anchor": anchor,
            "intra_alpha": intra_alpha,
            "interests": q,
            "present": present,
            "inter_alpha": inter_alpha,
            "current": c,
            "long_alpha": long_alpha,
            "preference": p,
            "z": z,
        }

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        return self.score_items(self.represent(batch)["z"])

    def graph_for(self, prefix) -> HeteroSessionGraph:
        return build_session_graph(prefix, self.n_types)

    @torch.no_grad()
    def predict(self, samples: Sequence[TrainingSample] | TrainingSample) -> np.ndarray:
        """Score vectors (softmax probabilities) for one or more samples, in
        evaluation mode."""
        single = isinstance(samples, TrainingSample)
        samples = [samples] if single else list(samples)
        was_training = self.training
        self.eval()
        try:
            dtype = self.embedding.dtype
            batch = collate([self.graph_for(s.prefix) for s in samples], dtype)
            probs = torch.softmax(self(batch), dim=-1).cpu().numpy()
        finally:
            self.train(was_training)
        return probs[0] if single else probs
