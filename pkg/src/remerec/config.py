"""Model and optimisation configuration.

Both configs are plain dataclasses that round-trip through JSON; the hash of
the canonical JSON form identifies a run in manifests and reports.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields


@dataclass
class ModelConfig:
    vocab_size: int = 32
    hidden: int = 64
    heads: int = 4
    ffn_mult: int = 2
    text_layers: int = 1
    fusion_layers: int = 2
    tmp_layers: int = 1
    dropout: float = 0.1
    pre_norm: bool = True
    max_text_len: int = 80
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    patch_bias: bool = True
    n_max: int = 4
    k_max: int = 6
    span_threshold: float = 0.5
    lambda_iou: float = 1.0
    lambda_l1: float = 1.0
    lambda_bbox: float = 1.0
    lambda_relation: float = 1.0
    use_tmp: bool = True
    use_eir: bool = True
    use_relation_loss: bool = True

    def __post_init__(self):
        if self.hidden <= 0:
            raise ValueError("hidden must be positive")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 < self.span_threshold < 1.0:
            raise ValueError("span_threshold must lie in (0, 1)")
        for name in ("lambda_iou", "lambda_l1", "lambda_bbox", "lambda_relation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_max < 1 or self.k_max < 0:
            raise ValueError("n_max must be >= 1 and k_max >= 0")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Layer counts and width used for the full-size model."""
        base = dict(hidden=256, heads=8, fusion_layers=6, tmp_layers=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 60
    batch_size: int = 32
    lr_head: float = 1e-4
    lr_backbone: float = 1e-5
    # Image encoder learning rate in stage two; None means lr_backbone.
    lr_image: float | None = None
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    stage1_max_len: int = 60
    stage2_max_len: int = 80
    # Weight of an L1 term tying the position predictor to the paired ground
    # truth span; 0 disables it.
    lambda_span: float = 0.0
    # Weight of the entity loss when it is kept active during stage two.
    lambda_entity_stage2: float = 0.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known_m = {f.name for f in fields(ModelConfig)}
        known_t = {f.name for f in fields(TrainConfig)}
        model = data.get("model", {})
        train = data.get("train", {})
        bad = (set(model) - known_m) | (set(train) - known_t) | (set(data) - {"model", "train"})
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        return cls(ModelConfig(**model), TrainConfig(**train))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(canonical_json(self.to_dict()))


def desk_config(**model_overrides) -> RunConfig:
    """Settings used by the synthetic acceptance runs."""
    model = ModelConfig(**model_overrides)
    train = TrainConfig(stage1_epochs=15, stage2_epochs=30, batch_size=16,
                        lr_head=1e-3, lr_backbone=1e-4, lr_image=1e-3, lambda_span=1.0)
    return RunConfig(model, train)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_hash(obj) -> str:
    if isinstance(obj, RunConfig):
        obj = obj.to_dict()
    elif dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()
