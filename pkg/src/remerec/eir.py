"""Entity inter-relationship reasoner.

Scores every directed entity pair, predicts how many pairs are real relations
and feeds the pooled relational strength back into the entity features.
"""
from __future__ import annotations

import math
import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .encoders import xavier_init


def _masked_mean(x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    w = valid.to(x.dtype)[..., None]
    return (x * w).sum(1) / w.sum(1).clamp(min=1)


class RelationScorer(nn.Module):
    """Interaction affinity plus subject-object matching, summed per pair."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.inter1 = nn.Linear(3 * d, d)
        self.inter2 = nn.Linear(d, 1)
        self.subj = nn.Linear(d, d, bias=False)
        self.obj = nn.Linear(d, d, bias=False)
        xavier_init(self)

    def forward(self, q: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        b, n, d = q.shape
        ctx = visual.mean(1)
        pair = torch.cat(
            [
                q[:, :, None, :].expand(b, n, n, d),
                q[:, None, :, :].expand(b, n, n, d),
                ctx[:, None, None, :].expand(b, n, n, d),
            ],
            dim=-1,
        )
        inter = self.inter2(F.gelu(self.inter1(pair))).squeeze(-1)
        sub_obj = self.subj(q) @ self.obj(q).transpose(-1, -2) / math.sqrt(d)
        return inter + sub_obj


class RelationCountPredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.hidden, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.k_max + 1)
        xavier_init(self)

    def forward(self, q: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        if valid is None:
            valid = torch.ones(q.shape[:2], dtype=torch.bool)
        return self.fc2(F.gelu(self.fc1(_masked_mean(q, valid))))


class EntityModulation(nn.Module):
    """Gated additive update ``Q + sigmoid(gate(Q)) * mlp(pooled strength)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.mlp1 = nn.Linear(1, d)
        self.mlp2 = nn.Linear(d, d)
        self.gate = nn.Linear(d, 1)
        xavier_init(self)

    def pooled_strength(self, scores: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Mean over the off-diagonal entries of row i and column i (0 when alone)."""
        n = scores.shape[1]
        pair = valid[:, :, None] & valid[:, None, :] & ~torch.eye(n, dtype=torch.bool)[None]
        s = scores * pair.to(scores.dtype)
        total = s.sum(2) + s.sum(1)
        count = pair.sum(2) + pair.sum(1)
        return total / count.clamp(min=1).to(scores.dtype)

    def forward(self, q, scores, valid=None):
        if valid is None:
            valid = torch.ones(q.shape[:2], dtype=torch.bool)
        pooled = self.pooled_strength(scores, valid)[..., None]
        m = self.mlp2(F.gelu(self.mlp1(pooled)))
        g = self.gate(q)
        return q + torch.sigmoid(g) * m


def select_top_k(scores, k: int) -> set[tuple[int, int]]:
    """Top-k off-diagonal cells; equal scores resolve in row-major order."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    limit = n * (n - 1)
    if not 0 <= k <= limit:
        warnings.warn(f"relation count {k} clamped to [0, {limit}]", stacklevel=2)
        k = min(max(k, 0), limit)
    cells = [(i, j) for i in range(n) for j in range(n) if i != j]
    flat = np.array([scores[i, j] for i, j in cells])
    # stable sort keeps row-major order among ties
    order = np.argsort(-flat, kind="stable")[:k]
    return {cells[c] for c in order}


class EIR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.scorer = RelationScorer(cfg)
        self.counter = RelationCountPredictor(cfg)
        self.modulation = EntityModulation(cfg)

    def forward(self, q, visual, valid):
        """Returns (scores, relation count logits, modulated queries)."""
        count_logits = self.counter(q, valid)
        if not self.cfg.use_eir:
            b, n, _ = q.shape
            return q.new_zeros(b, n, n), count_logits, q
        scores = self.scorer(q, visual)
        return scores, count_logits, self.modulation(q, scores, valid)


def score_relations(scorer: RelationScorer, q, visual) -> torch.Tensor:
    return scorer(q, visual)


def predict_relation_count(counter: RelationCountPredictor, q) -> torch.Tensor:
    return counter(q)


def modulate_entities(modulation: EntityModulation, q, scores) -> torch.Tensor:
    return modulation(q, scores)
