"""Full grounding model: encoders -> TMP -> EIR -> query engine."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .boxes import as_pixel_corners
from .config import ModelConfig
from .data import EntitySpan, Sample
from .eir import EIR, select_top_k
from .encoders import FusionEncoder, ImageEncoder, TextEncoder
from .query_engine import BoxHead, QueryBuilder, QueryDecoder
from .tmp import TMP


@dataclass
class Batch:
    token_ids: torch.Tensor  # B x L
    lengths: torch.Tensor  # B
    images: torch.Tensor  # B x C x H x W
    labels: torch.Tensor  # B x L token entity labels (0 beyond length)
    counts: torch.Tensor  # B
    samples: list[Sample]

    def __len__(self):
        return len(self.samples)


def collate(samples: list[Sample], dtype=torch.float32, with_images: bool = True) -> Batch:
    length = max(s.length for s in samples)
    ids = torch.from_numpy(np.stack([s.token_ids[:length] for s in samples]))
    lengths = torch.tensor([s.length for s in samples])
    labels = torch.zeros(len(samples), length, dtype=torch.long)
    for i, s in enumerate(samples):
        labels[i, : s.length] = torch.from_numpy(np.asarray(s.labels[: s.length]))
    if with_images:
        images = torch.from_numpy(np.stack([s.image_tensor for s in samples])).to(dtype)
    else:
        images = torch.zeros(0)
    counts = torch.tensor([s.gt_entity_count for s in samples])
    return Batch(ids, lengths, images, labels, counts, samples)


@dataclass
class Prediction:
    boxes: np.ndarray  # N x 4 normalized (cx, cy, w, h)
    relations: set
    entity_count: int
    aligned_spans: list[EntitySpan]

    def to_json(self, width: int, height: int) -> dict:
        corners = as_pixel_corners(self.boxes, width, height)
        return {
            "boxes": [[round(float(v), 4) for v in box] for box in corners],
            "relations": sorted([int(i), int(j)] for i, j in self.relations),
            "spans": [[sp.start, sp.end] for sp in self.aligned_spans],
        }


class ReMeREC(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg)
        self.tmp = TMP(cfg)
        self.image_encoder = ImageEncoder(cfg)
        self.fusion = FusionEncoder(cfg)
        self.eir = EIR(cfg)
        self.query_builder = QueryBuilder(cfg)
        self.query_decoder = QueryDecoder(cfg)
        self.box_head = BoxHead(cfg)

    def context_parameters(self):
        """Context encoder and entity classifier (the stage-one trainables)."""
        yield from self.text_encoder.parameters()
        yield from self.tmp.classifier.parameters()

    def backbone_parameters(self):
        yield from self.context_parameters()
        yield from self.image_encoder.parameters()

    def head_parameters(self):
        backbone = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in backbone]

    def text_forward(self, batch: Batch):
        text = self.text_encoder(batch.token_ids, batch.lengths)
        return text, self.tmp.classifier(text)

    def forward(self, batch: Batch, n_entities=None) -> dict:
        """Full pass. ``n_entities`` forces the entity count (teacher forcing);
        otherwise the count head decides."""
        text = self.text_encoder(batch.token_ids, batch.lengths)
        logits, ents = self.tmp(text, n_entities)
        visual = self.image_encoder(batch.images.to(text.features.dtype))
        fused = self.fusion(visual, text)
        scores, rel_count_logits, q_rel = self.eir(ents.Q, fused.visual_tokens, ents.entity_mask)
        queries = self.query_builder(fused.text_tokens, ents.masks, q_rel, ents.entity_mask)
        decoded = self.query_decoder(queries, fused, text.padding_mask, ents.entity_mask)
        boxes = self.box_head(decoded)
        return {
            "entity_logits": logits,
            "entities": ents,
            "relation_scores": scores,
            "relation_count_logits": rel_count_logits,
            "boxes": boxes,
        }


def decode_outputs(out: dict, cfg: ModelConfig) -> list[Prediction]:
    ents = out["entities"]
    preds = []
    for i in range(len(ents.aligned_spans)):
        n = int(ents.entity_mask[i].sum())
        scores = out["relation_scores"][i, :n, :n].detach().cpu().numpy()
        k = int(out["relation_count_logits"][i].argmax())
        k = min(k, n * (n - 1))
        rels = select_top_k(scores, k)
        preds.append(
            Prediction(
                boxes=out["boxes"][i, :n].detach().cpu().numpy().astype(np.float64),
                relations=rels,
                entity_count=n,
                aligned_spans=list(ents.aligned_spans[i]),
            )
        )
    return preds


@torch.no_grad()
def predict_batch(model: ReMeREC, samples: list[Sample]) -> list[Prediction]:
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        out = model(collate(samples, dtype))
        return decode_outputs(out, model.cfg)
    finally:
        model.train(was_training)


def predict(sample: Sample, model: ReMeREC) -> Prediction:
    """Boxes, relation set, entity count and aligned spans for one sample."""
    return predict_batch(model, [sample])[0]
