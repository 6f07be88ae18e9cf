"""Training objectives and prediction/ground-truth pairing."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .boxes import cxcywh_to_xyxy, generalized_box_iou


@dataclass
class LossBreakdown:
    entity: float = 0.0
    bbox: float = 0.0
    relation: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"entity": self.entity, "bbox": self.bbox, "relation": self.relation, "total": self.total}


def entity_loss(per_token_logits, gt_labels, valid, count_logits, gt_count, parts: bool = False):
    """Token-level binary cross-entropy (mean over valid tokens) plus count
    cross-entropy."""
    valid = valid.to(per_token_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(per_token_logits, gt_labels.to(per_token_logits.dtype), reduction="none")
    token_term = (bce * valid).sum() / valid.sum().clamp(min=1)
    count_term = F.cross_entropy(count_logits, torch.as_tensor(gt_count, dtype=torch.long))
    if parts:
        return token_term, count_term
    return token_term + count_term


def bbox_loss(pred, gt, valid=None, lambda_iou: float = 1.0, lambda_l1: float = 1.0, parts: bool = False):
    """``lambda_iou * mean(1 - GIoU) + lambda_l1 * mean(L1 over the 4 coords)``
    on centre-form boxes, averaged over valid entities."""
    if valid is None:
        valid = torch.ones(pred.shape[:-1], dtype=torch.bool)
    w = valid.to(pred.dtype)
    denom = w.sum().clamp(min=1)
    g = generalized_box_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
    # padded slots may hold degenerate boxes; keep their NaNs out of the sum
    g = torch.where(valid, g, torch.ones_like(g))
    iou_term = ((1 - g) * w).sum() / denom
    l1_term = ((pred - gt).abs().sum(-1) * w).sum() / denom
    if parts:
        return iou_term, l1_term
    return lambda_iou * iou_term + lambda_l1 * l1_term


def relation_loss(scores, gt_matrix, valid, count_logits, gt_count, parts: bool = False):
    """BCE over valid off-diagonal cells plus relation-count cross-entropy."""
    n = scores.shape[-1]
    cells = valid[:, :, None] & valid[:, None, :] & ~torch.eye(n, dtype=torch.bool)[None]
    w = cells.to(scores.dtype)
    bce = F.binary_cross_entropy_with_logits(scores, gt_matrix.to(scores.dtype), reduction="none")
    bce_term = (bce * w).sum() / w.sum().clamp(min=1)
    count_term = F.cross_entropy(count_logits, torch.as_tensor(gt_count, dtype=torch.long))
    if parts:
        return bce_term, count_term
    return bce_term + count_term


def pair_ground_truth(aligned_spans, gt_spans) -> list[tuple[int, int]]:
    """Pair predicted queries with ground-truth entities by caption order.

    Queries are sorted by aligned span start (query index breaks ties) and
    matched positionally to the ground truth, which is already in caption
    order. Returns ``(query_index, gt_index)`` pairs; surplus entities on
    either side stay unpaired.
    """
    order = sorted(range(len(aligned_spans)), key=lambda q: (aligned_spans[q].start, q))
    n = min(len(order), len(gt_spans))
    return [(order[k], k) for k in range(n)]


def remap_relations(relations, pairs) -> set[tuple[int, int]]:
    """Express ground-truth relations in query indices; relations touching an
    unpaired entity are dropped."""
    gt_to_q = {g: q for q, g in pairs}
    return {(gt_to_q[a], gt_to_q[b]) for a, b in relations if a in gt_to_q and b in gt_to_q}


def build_targets(entities, samples, dtype=torch.float32):
    """Ground-truth tensors in query order for a batch.

    Returns (boxes B x N x 4, box mask B x N, relation matrix B x N x N,
    relation counts B, span targets B x N x 2, pairs per sample).
    """
    b, n = entities.entity_mask.shape
    boxes = torch.zeros(b, n, 4, dtype=dtype)
    boxes[..., 2:] = 1.0
    box_mask = torch.zeros(b, n, dtype=torch.bool)
    rel = torch.zeros(b, n, n, dtype=dtype)
    rel_count = torch.zeros(b, dtype=torch.long)
    span_target = torch.zeros(b, n, 2, dtype=dtype)
    all_pairs = []
    for i, s in enumerate(samples):
        k = int(entities.entity_mask[i].sum())
        pairs = pair_ground_truth(entities.aligned_spans[i][:k], s.gt_spans)
        denom = max(s.length - 1, 1)
        for q, g in pairs:
            boxes[i, q] = torch.as_tensor(s.gt_boxes[g], dtype=dtype)
            box_mask[i, q] = True
            sp = s.gt_spans[g]
            span_target[i, q, 0] = sp.start / denom
            span_target[i, q, 1] = sp.end / denom
        for a, c in remap_relations(s.gt_relations, pairs):
            rel[i, a, c] = 1.0
        rel_count[i] = len(s.gt_relations)
        all_pairs.append(pairs)
    return boxes, box_mask, rel, rel_count, span_target, all_pairs


def span_loss(positions, span_target, box_mask):
    w = box_mask.to(positions.dtype)[..., None]
    return ((positions - span_target).abs() * w).sum() / (2 * w.sum()).clamp(min=1)
