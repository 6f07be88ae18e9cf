"""Text-adaptive multi-entity perceptron.

Finds how many entities a caption mentions and where, and produces one refined
query vector per entity together with a token mask over its phrase.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .data import EntitySpan
from .encoders import DecoderLayer, TextFeatures, xavier_init


@dataclass
class EntityLogits:
    per_token: torch.Tensor  # B x L
    count_logits: torch.Tensor  # B x (n_max + 1)


@dataclass
class EntityRepresentations:
    Q: torch.Tensor  # B x N x d
    entity_mask: torch.Tensor  # B x N, True at real entity slots
    aligned_spans: list[list[EntitySpan]]
    masks: torch.Tensor  # B x N x L token masks
    estimated_spans: list[list[EntitySpan]]
    positions: torch.Tensor | None  # B x N x 2 normalized (start, end)


class EntityClassifier(nn.Module):
    """Two hidden layers; token logits read off the penultimate features,
    the count head reads their masked mean."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)
        self.token_head = nn.Linear(d, 1)
        self.count_head = nn.Linear(d, cfg.n_max + 1)
        xavier_init(self)

    def forward(self, text: TextFeatures) -> EntityLogits:
        h = F.gelu(self.fc2(F.gelu(self.fc1(text.features))))
        per_token = self.token_head(h).squeeze(-1)
        valid = (~text.padding_mask).to(h.dtype)[..., None]
        pooled = (h * valid).sum(1) / valid.sum(1).clamp(min=1)
        return EntityLogits(per_token, self.count_head(pooled))


def classify_entities(classifier: EntityClassifier, text: TextFeatures) -> EntityLogits:
    return classifier(text)


def extract_candidate_spans(per_token_probs, tau: float, valid_length: int) -> list[EntitySpan]:
    """Maximal runs of consecutive valid positions whose probability is >= tau."""
    probs = np.asarray(per_token_probs, dtype=np.float64)[:valid_length]
    above = probs >= tau
    spans = []
    start = None
    for i, hit in enumerate(above):
        if hit and start is None:
            start = i
        elif not hit and start is not None:
            spans.append(EntitySpan(start, i - 1))
            start = None
    if start is not None:
        spans.append(EntitySpan(start, len(above) - 1))
    return spans


def scale_position(value: float, valid_length: int) -> int:
    """Map a normalized position to a token index, rounding half up."""
    idx = math.floor(value * (valid_length - 1) + 0.5)
    return min(max(idx, 0), valid_length - 1)


def estimated_span(start_norm: float, end_norm: float, valid_length: int) -> EntitySpan:
    # start may exceed end here; align_spans orders them only for the fallback
    return EntitySpan(scale_position(start_norm, valid_length), scale_position(end_norm, valid_length))


def align_spans(estimated, candidates, valid_length: int | None = None, seq_len: int | None = None):
    """Snap each estimated span to the candidate with the nearest centre.

    Ties go to the candidate with the lowest start. Without candidates the
    estimated span is used after ordering and clamping its endpoints. Returns
    ``(aligned_spans, masks)`` with one boolean mask per estimated span.
    """
    if not estimated:
        raise ValueError("need at least one estimated span")
    aligned = []
    for est in estimated:
        if candidates:
            c = est.center
            best = min(candidates, key=lambda cand: (abs(c - cand.center), cand.start))
            aligned.append(best)
        else:
            s, e = sorted((est.start, est.end))
            if valid_length is not None:
                s = min(max(s, 0), valid_length - 1)
                e = min(max(e, 0), valid_length - 1)
            aligned.append(EntitySpan(s, e))
    if seq_len is None:
        seq_len = valid_length if valid_length is not None else max(sp.end for sp in aligned) + 1
    masks = np.zeros((len(aligned), seq_len), dtype=bool)
    for i, sp in enumerate(aligned):
        masks[i, sp.start : sp.end + 1] = True
    return aligned, masks


class EntityQueryDecoder(nn.Module):
    """Learned query bank refined against the text features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.bank = nn.Parameter(torch.randn(cfg.n_max, cfg.hidden))
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.tmp_layers))
        self.norm = nn.LayerNorm(cfg.hidden) if cfg.pre_norm and cfg.tmp_layers else nn.Identity()
        xavier_init(self.layers)

    def forward(self, n_entities: torch.Tensor, text: TextFeatures) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns queries ``B x max(n) x d`` and the slot-validity mask."""
        n_entities = torch.as_tensor(n_entities)
        if (n_entities < 1).any() or (n_entities > self.cfg.n_max).any():
            raise ValueError(f"entity count must be within 1..{self.cfg.n_max}")
        b = text.features.shape[0]
        n = int(n_entities.max())
        valid = torch.arange(n)[None, :] < n_entities[:, None]
        q = self.bank[:n].to(text.features.dtype)[None].expand(b, n, -1)
        for layer in self.layers:
            q = layer(q, text.features, ~valid, text.padding_mask)
        return self.norm(q), valid


def decode_entity_queries(decoder: EntityQueryDecoder, n_entities: int, text: TextFeatures) -> torch.Tensor:
    q, _ = decoder(torch.full((text.features.shape[0],), n_entities), text)
    return q


class PositionPredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.hidden, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, 2)
        xavier_init(self)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.gelu(self.fc1(q))))


def predict_positions(predictor: PositionPredictor, q: torch.Tensor) -> torch.Tensor:
    return predictor(q)


class TMP(nn.Module):
    """Entity classifier, query decoder, position predictor and span alignment."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.classifier = EntityClassifier(cfg)
        self.decoder = EntityQueryDecoder(cfg)
        self.positions = PositionPredictor(cfg)
        # stand-in used when the perceptron is ablated
        self.shared_query = nn.Parameter(torch.randn(cfg.hidden))

    def predicted_count(self, logits: EntityLogits) -> torch.Tensor:
        return logits.count_logits.argmax(-1).clamp(min=1, max=self.cfg.n_max)

    def forward(self, text: TextFeatures, n_entities=None) -> tuple[EntityLogits, EntityRepresentations]:
        logits = self.classifier(text)
        if n_entities is None:
            n_entities = self.predicted_count(logits)
        n_entities = torch.as_tensor(n_entities, dtype=torch.long)
        b, seq_len = text.padding_mask.shape
        lengths = [int(v) for v in text.valid_length]

        if not self.cfg.use_tmp:
            n = int(n_entities.max())
            valid = torch.arange(n)[None, :] < n_entities[:, None]
            q = self.shared_query.to(text.features.dtype).expand(b, n, -1)
            full = [EntitySpan(0, length - 1) for length in lengths]
            spans = [[full[i]] * int(n_entities[i]) for i in range(b)]
            masks = torch.zeros(b, n, seq_len, dtype=torch.bool)
            for i in range(b):
                masks[i, : int(n_entities[i]), : lengths[i]] = True
            return logits, EntityRepresentations(q, valid, spans, masks, spans, None)

        q, valid = self.decoder(n_entities, text)
        pos = self.positions(q)
        probs = torch.sigmoid(logits.per_token.detach()).cpu().numpy()
        pos_np = pos.detach().cpu().numpy()
        masks = torch.zeros(b, q.shape[1], seq_len, dtype=torch.bool)
        all_aligned, all_est = [], []
        for i in range(b):
            k = int(n_entities[i])
            cands = extract_candidate_spans(probs[i], self.cfg.span_threshold, lengths[i])
            est = [estimated_span(pos_np[i, j, 0], pos_np[i, j, 1], lengths[i]) for j in range(k)]
            aligned, m = align_spans(est, cands, lengths[i], seq_len)
            masks[i, :k] = torch.from_numpy(m)
            all_aligned.append(aligned)
            all_est.append(est)
        return logits, EntityRepresentations(q, valid, all_aligned, masks, all_est, pos)
