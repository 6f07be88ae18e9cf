"""Two-stage training.

Stage one fits the context encoder and entity classifier on token-labelled
text. Stage two trains the whole model on grounding data with the box and
relation objectives, using the ground-truth entity count.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig, RunConfig
from .data import EntityTextRecord, Vocab, label_runs, tokenize
from .losses import LossBreakdown, bbox_loss, build_targets, entity_loss, relation_loss, span_loss
from .model import ReMeREC, collate

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a training loss stops being finite."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TextSample:
    token_ids: np.ndarray
    length: int
    labels: np.ndarray
    gt_entity_count: int
    tokens: list = field(default_factory=list)


@dataclass
class TrainState:
    model: ReMeREC
    optimizer: torch.optim.Optimizer
    config: RunConfig
    vocab: Vocab
    seed: int
    stage: int
    epoch: int = 0
    log: list = field(default_factory=list)


def configure_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> ReMeREC:
    torch.manual_seed(seed)
    return ReMeREC(cfg).to(dtype)


def text_samples(records: list[EntityTextRecord], vocab: Vocab, max_len: int) -> list[TextSample]:
    out = []
    for r in records:
        ids, length = tokenize(" ".join(r.tokens), vocab, max_len)
        labels = np.asarray(r.labels[:length], dtype=np.int64)
        out.append(TextSample(ids, length, labels, len(label_runs(labels)), list(r.tokens)))
    return out


def make_optimizer(model: ReMeREC, stage: int, cfg: RunConfig) -> torch.optim.AdamW:
    t = cfg.train
    if stage == 1:
        groups = [
            {"params": list(model.text_encoder.parameters()), "lr": t.lr_backbone},
            {"params": list(model.tmp.classifier.parameters()), "lr": t.lr_head},
        ]
    else:
        lr_image = t.lr_backbone if t.lr_image is None else t.lr_image
        groups = [
            {"params": list(model.context_parameters()), "lr": t.lr_backbone},
            {"params": list(model.image_encoder.parameters()), "lr": lr_image},
            {"params": model.head_parameters(), "lr": t.lr_head},
        ]
    return torch.optim.AdamW(groups, weight_decay=t.weight_decay)


def _epoch_order(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, stage, epoch]).permutation(n)


def _check_finite(loss, parts: dict, batch_samples, stage: int, epoch: int):
    if not math.isfinite(float(loss.detach())):
        dump = {
            "stage": stage,
            "epoch": epoch,
            "losses": {k: float(v.detach()) for k, v in parts.items()},
            "samples": [
                {"tokens": list(getattr(s, "tokens", [])), "length": int(s.length), "count": int(s.gt_entity_count)}
                for s in batch_samples
            ],
        }
        raise NumericError(f"non-finite loss in stage {stage}, epoch {epoch}: {json.dumps(dump['losses'])}", dump)


def stage1_step(model: ReMeREC, batch) -> tuple[torch.Tensor, dict]:
    text, logits = model.text_forward(batch)
    valid = ~text.padding_mask
    loss = entity_loss(logits.per_token, batch.labels, valid, logits.count_logits, batch.counts)
    return loss, {"entity": loss}


def stage2_step(model: ReMeREC, batch, cfg: RunConfig) -> tuple[torch.Tensor, dict]:
    m, t = cfg.model, cfg.train
    dtype = next(model.parameters()).dtype
    out = model(batch, n_entities=batch.counts)
    ents = out["entities"]
    boxes, box_mask, rel, rel_count, span_target, _ = build_targets(ents, batch.samples, dtype)
    lb = bbox_loss(out["boxes"], boxes, box_mask, m.lambda_iou, m.lambda_l1)
    valid = ents.entity_mask
    lr = relation_loss(out["relation_scores"], rel, valid, out["relation_count_logits"], rel_count)
    logits = out["entity_logits"]
    text_valid = torch.arange(batch.token_ids.shape[1])[None] < batch.lengths[:, None]
    le = entity_loss(logits.per_token, batch.labels, text_valid, logits.count_logits, batch.counts)
    total = m.lambda_bbox * lb
    if m.use_relation_loss:
        total = total + m.lambda_relation * lr
    if t.lambda_span and ents.positions is not None:
        total = total + t.lambda_span * span_loss(ents.positions, span_target, box_mask)
    if t.lambda_entity_stage2:
        total = total + t.lambda_entity_stage2 * le
    return total, {"entity": le, "bbox": lb, "relation": lr}


def _run_epochs(state: TrainState, data, epochs: int, step_fn, with_images: bool, on_epoch=None):
    cfg = state.config
    model, opt = state.model, state.optimizer
    dtype = next(model.parameters()).dtype
    bs = cfg.train.batch_size
    params = [p for g in opt.param_groups for p in g["params"]]
    while state.epoch < epochs:
        epoch = state.epoch
        torch.manual_seed(state.seed * 1_000_003 + state.stage * 10_007 + epoch)
        order = _epoch_order(state.seed, state.stage, epoch, len(data))
        model.train()
        sums = {"entity": 0.0, "bbox": 0.0, "relation": 0.0, "total": 0.0}
        start = time.perf_counter()
        for b0 in range(0, len(data), bs):
            samples = [data[i] for i in order[b0 : b0 + bs]]
            batch = collate(samples, dtype, with_images)
            loss, parts = step_fn(model, batch)
            _check_finite(loss, {**parts, "total": loss}, samples, state.stage, epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.train.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
            opt.step()
            for k, v in parts.items():
                sums[k] += float(v.detach()) * len(samples)
            sums["total"] += float(loss.detach()) * len(samples)
        state.epoch += 1
        rec = {"epoch": state.epoch, **{k: v / len(data) for k, v in sums.items()}}
        rec["wall_time"] = round(time.perf_counter() - start, 3)
        state.log.append(rec)
        log.info("stage %d epoch %d: %s", state.stage, state.epoch, rec)
        if on_epoch is not None:
            on_epoch(state)
    return state


def train_stage1(records: list[EntityTextRecord], cfg: RunConfig, seed: int, vocab: Vocab | None = None,
                 state: TrainState | None = None, on_epoch=None) -> TrainState:
    """Fit the context encoder and entity classifier with the entity loss."""
    configure_determinism()
    if vocab is None:
        vocab = Vocab.build(" ".join(r.tokens) for r in records)
    max_len = min(cfg.train.stage1_max_len, cfg.model.max_text_len)
    data = text_samples(records, vocab, max_len)
    if state is None:
        if cfg.model.vocab_size < len(vocab):
            raise ValueError(f"vocab has {len(vocab)} words but vocab_size is {cfg.model.vocab_size}")
        model = build_model(cfg.model, seed)
        state = TrainState(model, make_optimizer(model, 1, cfg), cfg, vocab, seed, stage=1)
    return _run_epochs(state, data, cfg.train.stage1_epochs, stage1_step, with_images=False, on_epoch=on_epoch)


def train_stage2(samples, cfg: RunConfig, seed: int, init: TrainState | None = None, vocab: Vocab | None = None,
                 state: TrainState | None = None, on_epoch=None) -> TrainState:
    """Train the full model from a stage-one state (or from scratch when
    ``init`` is None)."""
    configure_determinism()
    if state is None:
        if init is not None:
            model = init.model
            vocab = init.vocab
        else:
            if vocab is None:
                raise ValueError("a vocabulary is required without a stage-one state")
            model = build_model(cfg.model, seed)
        model.cfg = cfg.model
        for mod in model.modules():
            if hasattr(mod, "cfg"):
                mod.cfg = cfg.model
        torch.manual_seed(seed)
        state = TrainState(model, make_optimizer(model, 2, cfg), cfg, vocab, seed, stage=2)
    return _run_epochs(state, samples, cfg.train.stage2_epochs, lambda m, b: stage2_step(m, b, cfg),
                       with_images=True, on_epoch=on_epoch)


def optimizer_step_is_noop(model: ReMeREC, batch, cfg: RunConfig) -> bool:
    """True when an lr=0 step leaves every parameter bitwise unchanged."""
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=cfg.train.weight_decay)
    loss, _ = stage2_step(model, batch, cfg)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return all(torch.equal(before[k], v) for k, v in model.state_dict().items())
