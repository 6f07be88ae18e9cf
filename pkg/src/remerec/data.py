"""Record formats, validation, tokenization and the synthetic scene corpus.

Two on-disk formats are supported:

* ReMeX-style grounding files: a JSON array of records with keys
  ``image_ref``, ``caption``, ``boxes`` (list of ``{x_min, y_min, x_max,
  y_max, label}``), ``source`` and ``target``. Optional ``width``/``height``
  keys enable the image-bounds check.
* EntityText files: JSON lines with keys ``tokens`` and ``labels`` (and an
  optional ``entity_count`` that is cross-checked).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import corners_to_center

PAD, UNK = "<pad>", "<unk>"

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SHAPES = ("square", "circle", "triangle")
RELATIONS = ("left of", "right of", "above", "below")


class FormatError(ValueError):
    """Input could not be parsed."""


class ValidationError(ValueError):
    """A parsed record violates a format rule."""

    def __init__(self, message: str, index: int | None = None, rule: str | None = None):
        self.index = index
        self.rule = rule
        prefix = f"record {index}: " if index is not None else ""
        suffix = f" [{rule}]" if rule else ""
        super().__init__(f"{prefix}{message}{suffix}")


@dataclass(frozen=True)
class EntitySpan:
    """Inclusive token interval."""

    start: int
    end: int

    @property
    def center(self) -> float:
        return (self.start + self.end) / 2


@dataclass
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: str = ""

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class RemexRecord:
    image_ref: str
    caption: str
    boxes: list[Box]
    source: list[int]
    target: list[int]
    width: int | None = None
    height: int | None = None

    @property
    def relations(self) -> set[tuple[int, int]]:
        return set(zip(self.source, self.target))

    def to_json(self) -> dict:
        out = {
            "image_ref": self.image_ref,
            "caption": self.caption,
            "boxes": [
                {"x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max, "label": b.label}
                for b in self.boxes
            ],
            "source": list(self.source),
            "target": list(self.target),
        }
        if self.width is not None:
            out["width"] = self.width
        if self.height is not None:
            out["height"] = self.height
        return out

    @classmethod
    def from_json(cls, obj: dict, index: int | None = None) -> "RemexRecord":
        if not isinstance(obj, dict):
            raise ValidationError("record is not an object", index, "schema")
        missing = {"image_ref", "caption", "boxes", "source", "target"} - set(obj)
        if missing:
            raise ValidationError(f"missing keys {sorted(missing)}", index, "schema")
        try:
            boxes = [
                Box(float(b["x_min"]), float(b["y_min"]), float(b["x_max"]), float(b["y_max"]), str(b.get("label", "")))
                for b in obj["boxes"]
            ]
            source = [int(i) for i in obj["source"]]
            target = [int(i) for i in obj["target"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed field: {exc}", index, "schema") from None
        return cls(
            image_ref=str(obj["image_ref"]),
            caption=str(obj["caption"]),
            boxes=boxes,
            source=source,
            target=target,
            width=obj.get("width"),
            height=obj.get("height"),
        )


@dataclass
class EntityTextRecord:
    tokens: list[str]
    labels: list[int]
    entity_count: int

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "labels": list(self.labels)}


@dataclass
class Sample:
    """Model-ready view of one grounding example."""

    token_ids: np.ndarray
    length: int
    tokens: list[str]
    labels: np.ndarray
    image_tensor: np.ndarray
    gt_boxes: np.ndarray
    gt_spans: list[EntitySpan]
    gt_relations: tuple[tuple[int, int], ...]
    gt_entity_count: int

    def __post_init__(self):
        if not self.gt_entity_count == len(self.gt_boxes) == len(self.gt_spans):
            raise ValidationError("entity count, boxes and spans disagree", rule="entity-count")
        for a, b in zip(self.gt_spans, self.gt_spans[1:]):
            if b.start <= a.end + 1:
                raise ValidationError("spans overlap or touch", rule="span-order")


# ---------------------------------------------------------------------------
# validation and file IO


def label_runs(labels) -> list[EntitySpan]:
    """Maximal runs of 1s, in order."""
    spans = []
    start = None
    for i, v in enumerate(labels):
        if v and start is None:
            start = i
        elif not v and start is not None:
            spans.append(EntitySpan(start, i - 1))
            start = None
    if start is not None:
        spans.append(EntitySpan(start, len(labels) - 1))
    return spans


def validate_remex(record: RemexRecord, index: int | None = None, n_max: int = 4) -> None:
    n = len(record.boxes)
    if not 1 <= n <= n_max:
        raise ValidationError(f"{n} boxes, expected 1..{n_max}", index, "box-count")
    if len(record.source) != len(record.target):
        raise ValidationError(
            f"source has {len(record.source)} entries, target has {len(record.target)}", index, "length-mismatch"
        )
    seen = set()
    for s, t in zip(record.source, record.target):
        if not (0 <= s < n and 0 <= t < n):
            raise ValidationError(f"relation ({s}, {t}) indexes outside 0..{n - 1}", index, "index-range")
        if s == t:
            raise ValidationError(f"relation ({s}, {t}) relates an entity to itself", index, "self-relation")
        if (s, t) in seen:
            raise ValidationError(f"relation ({s}, {t}) repeated", index, "duplicate-relation")
        seen.add((s, t))
    for k, b in enumerate(record.boxes):
        if not (b.x_min < b.x_max and b.y_min < b.y_max):
            raise ValidationError(f"box {k} is degenerate", index, "degenerate-box")
        if b.x_min < 0 or b.y_min < 0:
            raise ValidationError(f"box {k} outside image", index, "image-bounds")
        if record.width is not None and b.x_max > record.width:
            raise ValidationError(f"box {k} outside image", index, "image-bounds")
        if record.height is not None and b.y_max > record.height:
            raise ValidationError(f"box {k} outside image", index, "image-bounds")


def validate_entitytext(record: EntityTextRecord, index: int | None = None, stated_count: int | None = None) -> None:
    if len(record.tokens) != len(record.labels):
        raise ValidationError("tokens and labels differ in length", index, "length-mismatch")
    if any(v not in (0, 1) for v in record.labels):
        raise ValidationError("labels must be 0 or 1", index, "binary-labels")
    runs = len(label_runs(record.labels))
    if runs == 0:
        raise ValidationError("no entity phrase", index, "at-least-one-entity")
    if stated_count is not None and stated_count != runs:
        rule = "adjacent-entities" if stated_count > runs else "entity-count"
        raise ValidationError(f"entity_count {stated_count} but labels contain {runs} runs", index, rule)


def _read_json(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if text.splitlines() else ""
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}: {line.strip()!r}") from None


def load_remex(path, n_max: int = 4) -> list[RemexRecord]:
    data = _read_json(path)
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of records")
    records = []
    for i, obj in enumerate(data):
        rec = RemexRecord.from_json(obj, i)
        validate_remex(rec, i, n_max)
        records.append(rec)
    return records


def dump_remex(records, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_json() for r in records], fh, indent=1)
        fh.write("\n")


def load_entitytext(path) -> list[EntityTextRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}:{exc.colno}: {exc.msg}: {line.strip()!r}") from None
            index = len(records)
            if not isinstance(obj, dict) or "tokens" not in obj or "labels" not in obj:
                raise ValidationError("expected keys tokens, labels", index, "schema")
            tokens = [str(t) for t in obj["tokens"]]
            labels = list(obj["labels"])
            rec = EntityTextRecord(tokens, labels, len(label_runs(labels)))
            validate_entitytext(rec, index, obj.get("entity_count"))
            records.append(rec)
    return records


def dump_entitytext(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")



def check_file(path, fmt: str, n_max: int = 4) -> list[ValidationError]:
    """Every rule violation in a ReMeX (``fmt="remex"``) or EntityText file.

    Unlike the loaders this keeps going after the first bad record. Parse
    errors still raise :class:`FormatError`.
    """
    problems = []
    if fmt == "remex":
        data = _read_json(path)
        if not isinstance(data, list):
            raise FormatError(f"{path}: expected a JSON array of records")
        for i, obj in enumerate(data):
            try:
                validate_remex(RemexRecord.from_json(obj, i), i, n_max)
            except ValidationError as exc:
                problems.append(exc)
    elif fmt == "entitytext":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        for i, line in enumerate(lines):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: record {i}: {exc.msg}") from None
            if not isinstance(obj, dict) or "tokens" not in obj or "labels" not in obj:
                problems.append(ValidationError("expected keys tokens, labels", i, "schema"))
                continue
            labels = list(obj["labels"])
            rec = EntityTextRecord([str(t) for t in obj["tokens"]], labels, 0)
            try:
                validate_entitytext(rec, i, obj.get("entity_count"))
            except ValidationError as exc:
                problems.append(exc)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return problems

# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    def __init__(self, words):
        self.itos = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, captions) -> "Vocab":
        words = sorted({w for c in captions for w in c.lower().split()})
        return cls(words)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def __getitem__(self, word) -> int:
        return self.stoi.get(word, self.unk_id)


def tokenize(caption: str, vocab: Vocab, max_len: int) -> tuple[np.ndarray, int]:
    """Whitespace tokenization to a fixed-length id array; returns (ids, true length)."""
    words = caption.lower().split()
    if not words:
        raise ValidationError("empty caption", rule="empty-caption")
    words = words[:max_len]
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[: len(words)] = [vocab[w] for w in words]
    return ids, len(words)


def synthetic_vocab() -> Vocab:
    words = ["the", *COLORS, *SHAPES]
    for rel in RELATIONS:
        words.extend(rel.split())
    return Vocab.build([" ".join(words)])


# ---------------------------------------------------------------------------
# conversion to model samples


def find_spans(tokens: list[str], labels: list[str]) -> list[EntitySpan]:
    """Locate each box label as a token sequence, scanning left to right."""
    spans = []
    pos = 0
    for label in labels:
        words = label.lower().split()
        k = len(words)
        for s in range(pos, len(tokens) - k + 1):
            if tokens[s : s + k] == words:
                spans.append(EntitySpan(s, s + k - 1))
                pos = s + k
                break
        else:
            raise ValidationError(f"box label {label!r} not found in caption", rule="label-span")
    return spans


def make_sample(record: RemexRecord, image: np.ndarray, vocab: Vocab, max_len: int = 80) -> Sample:
    """Build a Sample; entity spans come from locating box labels in the caption."""
    _, height, width = image.shape
    tokens = record.caption.lower().split()[:max_len]
    ids, length = tokenize(record.caption, vocab, max_len)
    spans = find_spans(tokens, [b.label for b in record.boxes])
    labels = np.zeros(length, dtype=np.int64)
    for sp in spans:
        labels[sp.start : sp.end + 1] = 1
    boxes = np.array([corners_to_center(b.corners(), width, height) for b in record.boxes], dtype=np.float64)
    return Sample(
        token_ids=ids,
        length=length,
        tokens=tokens,
        labels=labels,
        image_tensor=image.astype(np.float32),
        gt_boxes=boxes,
        gt_spans=spans,
        gt_relations=tuple(sorted(record.relations)),
        gt_entity_count=len(record.boxes),
    )


def entitytext_from_remex(record: RemexRecord) -> EntityTextRecord:
    tokens = record.caption.lower().split()
    spans = find_spans(tokens, [b.label for b in record.boxes])
    labels = [0] * len(tokens)
    for sp in spans:
        labels[sp.start : sp.end + 1] = [1] * (sp.end - sp.start + 1)
    return EntityTextRecord(tokens, labels, len(spans))


# ---------------------------------------------------------------------------
# synthetic scenes


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if kind == "triangle":
        return np.abs(xx - size / 2) <= yy / 2
    raise ValueError(kind)


def _satisfies(rel: str, a, b, margin: float = 2.0) -> bool:
    acx, acy = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
    bcx, bcy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
    if rel == "left of":
        return bcx - acx >= margin
    if rel == "right of":
        return acx - bcx >= margin
    if rel == "above":
        return bcy - acy >= margin
    if rel == "below":
        return acy - bcy >= margin
    raise ValueError(rel)


def _place(rng, entities, rels, size, max_tries=200):
    for _ in range(max_tries):
        placed = []
        for kind, _, side in entities:
            mask = _shape_mask(kind, side)
            x = int(rng.integers(0, size - side + 1))
            y = int(rng.integers(0, size - side + 1))
            ys, xs = np.nonzero(mask)
            box = (x + xs.min(), y + ys.min(), x + xs.max() + 1, y + ys.max() + 1)
            foot = (x, y, x + side, y + side)
            placed.append((mask, (x, y), box, foot))
        ok = True
        for i in range(len(placed)):
            for j in range(i + 1, len(placed)):
                a, b = placed[i][3], placed[j][3]
                if not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1]):
                    ok = False
        if ok and all(_satisfies(r, placed[i][2], placed[i + 1][2]) for i, r in enumerate(rels)):
            return placed
    return None


def generate_synthetic(seed: int, n: int, max_entities: int = 4, image_size: int = 64, max_len: int = 80):
    """Deterministic synthetic grounding corpus.

    Returns ``n`` pairs of (RemexRecord, Sample). Each scene holds 1..max_entities
    non-overlapping shapes with distinct (colour, shape) pairs; the caption
    chains them with spatial relation phrases, each phrase relating the entity
    before it to the entity after it.
    """
    if not 1 <= max_entities <= 4:
        raise ValueError("max_entities must be in 1..4")
    rng = np.random.default_rng(seed)
    vocab = synthetic_vocab()
    combos = [(c, s) for c in COLORS for s in SHAPES]
    out = []
    while len(out) < n:
        k = int(rng.integers(1, max_entities + 1))
        picks = rng.choice(len(combos), size=k, replace=False)
        ents = [(combos[p][1], combos[p][0], int(rng.integers(8, 21))) for p in picks]
        rels = [RELATIONS[int(rng.integers(len(RELATIONS)))] for _ in range(k - 1)]
        placed = _place(rng, ents, rels, image_size)
        if placed is None:
            continue
        image = np.zeros((3, image_size, image_size), dtype=np.float32)
        boxes = []
        for (kind, color, _), (mask, (x, y), box, _) in zip(ents, placed):
            h, w = mask.shape
            region = image[:, y : y + h, x : x + w]
            region[:, mask] = np.asarray(COLORS[color], dtype=np.float32)[:, None]
            boxes.append(Box(*map(float, box), label=f"{color} {kind}"))
        words = []
        for i, (kind, color, _) in enumerate(ents):
            if i:
                words.append(rels[i - 1])
            words.append(f"the {color} {kind}")
        rec = RemexRecord(
            image_ref=f"synthetic/{seed}/{len(out):06d}",
            caption=" ".join(words),
            boxes=boxes,
            source=list(range(k - 1)),
            target=list(range(1, k)),
            width=image_size,
            height=image_size,
        )
        out.append((rec, make_sample(rec, image, vocab, max_len)))
    return out


# ---------------------------------------------------------------------------
# raster persistence and corpus directories


def write_ppm(path, image: np.ndarray) -> None:
    """Write a C x H x W float image in [0, 1] as binary PPM."""
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    raw = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval


def save_corpus(directory, pairs) -> None:
    """Write rasters, a ReMeX JSON file and an EntityText JSON-lines file."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (rec, sample) in enumerate(pairs):
        name = f"images/{i:06d}.ppm"
        write_ppm(directory / name, sample.image_tensor)
        records.append(RemexRecord(name, rec.caption, rec.boxes, rec.source, rec.target, rec.width, rec.height))
    dump_remex(records, directory / "remex.json")
    dump_entitytext([entitytext_from_remex(r) for r in records], directory / "entitytext.jsonl")


def load_corpus(directory, vocab: Vocab | None = None, max_len: int = 80, n_max: int = 4):
    """Load a corpus directory written by ``save_corpus``; returns (records, samples, vocab)."""
    directory = Path(directory)
    records = load_remex(directory / "remex.json", n_max)
    if vocab is None:
        vocab = Vocab.build(r.caption for r in records)
    samples = []
    for rec in records:
        image = read_ppm(os.path.join(directory, rec.image_ref))
        samples.append(make_sample(rec, image, vocab, max_len))
    return records, samples, vocab
