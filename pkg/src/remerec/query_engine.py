"""Structured query construction, query decoding and box regression."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .encoders import FeedForward, FusedFeatures, MultiHeadAttention, Residual, xavier_init


class QueryBuilder(nn.Module):
    """Attention-pools each entity's masked text span and merges it with the
    relation-aware entity feature."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.scorer = nn.Linear(d, 1)
        self.merge = nn.Linear(2 * d, d)
        self.bias = nn.Parameter(torch.zeros(d))
        xavier_init(self)
        nn.init.normal_(self.bias, std=0.02)

    def context(self, text_tokens: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """``B x N x d`` entity-context embeddings; masks are ``B x N x L``."""
        logits = self.scorer(text_tokens).squeeze(-1)[:, None, :]  # B x 1 x L
        logits = logits.masked_fill(~masks, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        return weights @ text_tokens

    def forward(self, text_tokens, masks, q_rel, valid=None):
        if valid is None:
            valid = torch.ones(masks.shape[:2], dtype=torch.bool)
        empty = (~masks.any(-1)) & valid
        if empty.any():
            raise ValueError("entity mask selects no token")
        # padded entity slots get a dummy full mask so softmax stays finite
        masks = masks | (~valid)[..., None]
        ctx = self.context(text_tokens, masks)
        return self.merge(torch.cat([ctx, q_rel], dim=-1)) + self.bias


class QueryDecoder(nn.Module):
    """Self-attention among queries (soft adjacency), then cross-attention to
    the fused visual and text memory."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.graph_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.ffn1 = FeedForward(d, d * cfg.ffn_mult, cfg.dropout)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.ffn2 = FeedForward(d, d * cfg.ffn_mult, cfg.dropout)
        self.res = nn.ModuleList(Residual(d, cfg.pre_norm, cfg.dropout) for _ in range(4))
        self.norm = nn.LayerNorm(d) if cfg.pre_norm else nn.Identity()
        xavier_init(self)

    def forward(self, queries, fused: FusedFeatures, text_pad=None, valid=None, visual_pad=None):
        b, p = fused.visual_tokens.shape[:2]
        memory = torch.cat([fused.visual_tokens, fused.text_tokens], dim=1)
        if visual_pad is None:
            visual_pad = torch.zeros(b, p, dtype=torch.bool)
        if text_pad is None:
            text_pad = torch.zeros(fused.text_tokens.shape[:2], dtype=torch.bool)
        memory_pad = torch.cat([visual_pad, text_pad], dim=1)
        query_pad = None if valid is None else ~valid
        x = self.res[0](queries, lambda y: self.graph_attn(y, y, y, query_pad))
        x = self.res[1](x, self.ffn1)
        x = self.res[2](x, lambda y: self.cross_attn(y, memory, memory, memory_pad))
        x = self.res[3](x, self.ffn2)
        return self.norm(x)


class BoxHead(nn.Module):
    """Three-layer feedforward head producing sigmoid ``(cx, cy, w, h)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)
        self.fc3 = nn.Linear(d, 4)
        xavier_init(self)

    def forward(self, x):
        return torch.sigmoid(self.fc3(F.gelu(self.fc2(F.gelu(self.fc1(x))))))


def build_queries(builder: QueryBuilder, text_tokens, masks, q_rel):
    return builder(text_tokens, masks, q_rel)


def decode_queries(decoder: QueryDecoder, queries, fused: FusedFeatures, **kw):
    return decoder(queries, fused, **kw)


def regress_boxes(head: BoxHead, decoded):
    return head(decoded)
