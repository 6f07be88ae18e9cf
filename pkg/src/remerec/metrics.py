"""Grounding and relation metrics, and the evaluation report."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .boxes import as_pixel_corners, iou
from .config import canonical_json, config_hash
from .data import label_runs
from .losses import pair_ground_truth
from .model import collate, decode_outputs

IOU_THRESHOLD = 0.5


@dataclass
class MetricReport:
    grounding_acc: float
    image_level_rel_acc: float
    relation_level_rel_acc: float
    entity_count_acc: float
    n_samples: int
    n_gt_boxes: int
    n_gt_relations: int

    def to_dict(self) -> dict:
        return asdict(self)


def greedy_iou_pairs(pred_boxes, gt_boxes) -> list[tuple[int, int]]:
    """Pair highest-IoU (pred, gt) couples first; ties resolve row-major."""
    cells = [(iou(p, g), i, j) for i, p in enumerate(pred_boxes) for j, g in enumerate(gt_boxes)]
    cells.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cells:
        if i not in used_p and j not in used_g:
            pairs.append((i, j))
            used_p.add(i)
            used_g.add(j)
    return sorted(pairs)


def sample_pairs(pred_boxes, gt_boxes, pred_spans=None, gt_spans=None) -> list[tuple[int, int]]:
    if pred_spans is not None and gt_spans is not None:
        return pair_ground_truth(pred_spans, gt_spans)
    return greedy_iou_pairs(pred_boxes, gt_boxes)


def grounding_hits(pred_boxes, gt_boxes, pairs) -> int:
    return sum(iou(pred_boxes[q], gt_boxes[g]) >= IOU_THRESHOLD for q, g in pairs)


def grounding_accuracy(pred_boxes, gt_boxes, pred_spans=None, gt_spans=None) -> float:
    """Fraction of ground-truth boxes (over all samples) matched at IoU >= 0.5.

    Arguments are per-sample lists of corner-form boxes (and optionally spans,
    which select caption-order pairing). Unpaired ground truth counts as a miss.
    """
    hits = total = 0
    for k in range(len(gt_boxes)):
        ps = pred_spans[k] if pred_spans is not None else None
        gs = gt_spans[k] if gt_spans is not None else None
        pairs = sample_pairs(pred_boxes[k], gt_boxes[k], ps, gs)
        hits += grounding_hits(pred_boxes[k], gt_boxes[k], pairs)
        total += len(gt_boxes[k])
    if total == 0:
        raise ValueError("no ground-truth boxes")
    return hits / total


def reindex_relations(pred_relations, pairs) -> set:
    """Move predicted relations into ground-truth indices; endpoints without a
    partner get unique negative indices so they can never match."""
    q_to_g = {q: g for q, g in pairs}
    return {(q_to_g.get(a, -1 - a), q_to_g.get(b, -1 - b)) for a, b in pred_relations}


def relation_accuracy(pred_sets, gt_sets) -> tuple[float, float]:
    """(image-level exact-set accuracy, relation-level recall over all GT relations)."""
    if not gt_sets:
        raise ValueError("no samples")
    exact = sum(set(p) == set(g) for p, g in zip(pred_sets, gt_sets))
    correct = sum(len(set(p) & set(g)) for p, g in zip(pred_sets, gt_sets))
    n_rel = sum(len(set(g)) for g in gt_sets)
    relation_level = correct / n_rel if n_rel else float(exact == len(gt_sets))
    return exact / len(gt_sets), relation_level


def entity_count_accuracy(pred_counts, gt_counts) -> float:
    return float(np.mean(np.asarray(pred_counts) == np.asarray(gt_counts)))


def token_f1(pred_labels, gt_labels) -> float:
    tp = fp = fn = 0
    for p, g in zip(pred_labels, gt_labels):
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        tp += int((p & g).sum())
        fp += int((p & ~g).sum())
        fn += int((~p & g).sum())
    return 2 * tp / max(2 * tp + fp + fn, 1)


@torch.no_grad()
def entity_metrics(model, samples, batch_size: int = 256, threshold: float | None = None) -> dict:
    """Token-label F1 and entity-count accuracy of the text branch."""
    model.eval()
    thr = model.cfg.span_threshold if threshold is None else threshold
    dtype = next(model.parameters()).dtype
    pred_labels, gt_labels, pred_counts, gt_counts = [], [], [], []
    for b0 in range(0, len(samples), batch_size):
        chunk = samples[b0 : b0 + batch_size]
        _, logits = model.text_forward(collate(chunk, dtype, with_images=False))
        probs = torch.sigmoid(logits.per_token).numpy()
        counts = model.tmp.predicted_count(logits).numpy()
        for i, s in enumerate(chunk):
            pred_labels.append(probs[i, : s.length] >= thr)
            gt_labels.append(np.asarray(s.labels[: s.length]))
            pred_counts.append(int(counts[i]))
            gt_counts.append(len(label_runs(s.labels[: s.length])))
    return {
        "token_f1": token_f1(pred_labels, gt_labels),
        "entity_count_acc": entity_count_accuracy(pred_counts, gt_counts),
        "n_samples": len(samples),
    }


@torch.no_grad()
def run_predictions(model, samples, batch_size: int = 64):
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for b0 in range(0, len(samples), batch_size):
        chunk = samples[b0 : b0 + batch_size]
        preds.extend(decode_outputs(model(collate(chunk, dtype)), model.cfg))
    return preds


def evaluate(model, samples, batch_size: int = 64) -> MetricReport:
    """Run inference on every sample and aggregate all metrics."""
    if not samples:
        raise ValueError("evaluation split is empty (n_samples must be >= 1)")
    preds = run_predictions(model, samples, batch_size)
    hits = n_boxes = 0
    pred_sets, gt_sets, pred_counts, gt_counts = [], [], [], []
    for pred, s in zip(preds, samples):
        _, h, w = s.image_tensor.shape
        pb = as_pixel_corners(pred.boxes, w, h)
        gb = as_pixel_corners(s.gt_boxes, w, h)
        pairs = pair_ground_truth(pred.aligned_spans, s.gt_spans)
        hits += grounding_hits(pb, gb, pairs)
        n_boxes += len(gb)
        pred_sets.append(reindex_relations(pred.relations, pairs))
        gt_sets.append(set(s.gt_relations))
        pred_counts.append(pred.entity_count)
        gt_counts.append(s.gt_entity_count)
    image_level, relation_level = relation_accuracy(pred_sets, gt_sets)
    return MetricReport(
        grounding_acc=hits / n_boxes,
        image_level_rel_acc=image_level,
        relation_level_rel_acc=relation_level,
        entity_count_acc=entity_count_accuracy(pred_counts, gt_counts),
        n_samples=len(samples),
        n_gt_boxes=n_boxes,
        n_gt_relations=sum(len(g) for g in gt_sets),
    )


def dataset_hash(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.asarray(s.token_ids).tobytes())
        h.update(np.ascontiguousarray(s.image_tensor).tobytes())
        h.update(np.asarray(s.gt_boxes, dtype=np.float64).tobytes())
        h.update(repr(s.gt_relations).encode())
    return h.hexdigest()


def write_report(report: MetricReport, path, config=None, checkpoint_hash: str = "", data_hash: str = "") -> str:
    payload = report.to_dict()
    payload["config_hash"] = config_hash(config) if config is not None else ""
    payload["checkpoint_hash"] = checkpoint_hash
    payload["dataset_hash"] = data_hash
    text = canonical_json(payload)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
