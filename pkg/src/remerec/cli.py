"""Command-line front end.

Subcommands: ``synth``, ``validate``, ``train``, ``eval`` and ``predict``.
Exit status is 0 on success, 1 for invalid input, 2 for I/O failures and 3
when training stops on a non-finite loss. Every command writes a run
manifest (command line, config hash, seed, inputs, outputs, version, wall
time) next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "REMEREC_SEED"
# model fields that fix parameter shapes
SHAPE_FIELDS = (
    "vocab_size", "hidden", "heads", "ffn_mult", "text_layers", "fusion_layers", "tmp_layers",
    "max_text_len", "image_size", "channels", "patch_size", "patch_bias", "n_max", "k_max", "pre_norm",
)

log = logging.getLogger("remerec")


class UsageError(Exception):
    """Arguments are inconsistent."""


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def _write_manifest(path, command, args, seed=None, config=None, inputs=(), outputs=(), started=0.0, extra=None):
    from .config import config_hash

    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_hash": config_hash(config) if config is not None else None,
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": _version(),
        "wall_time": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stderr.write(text)
    else:
        Path(path).write_text(text)
    return manifest


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .data import generate_synthetic, save_corpus

    started = time.perf_counter()
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    seed = _seed(args)
    pairs = generate_synthetic(seed, args.n, args.max_entities, args.image_size)
    out = Path(args.out)
    save_corpus(out, pairs)
    _write_manifest(
        out / "manifest.json", "synth", args, seed=seed,
        outputs=[out / "remex.json", out / "entitytext.jsonl", out / "images"], started=started,
        extra={"n": args.n, "max_entities": args.max_entities},
    )
    print(f"wrote {args.n} scenes to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .data import check_file

    started = time.perf_counter()
    problems = check_file(args.path, args.format, args.n_max)
    for p in problems:
        print(f"{args.path}: {p}")
    if not problems:
        print(f"{args.path}: ok")
    _write_manifest(args.manifest, "validate", args, inputs=[args.path], started=started,
                    extra={"violations": len(problems)})
    return EXIT_INVALID if problems else EXIT_OK


def _load_config(args, vocab_size: int):
    from .config import RunConfig, desk_config

    cfg = RunConfig.load(args.config) if args.config else desk_config()
    if cfg.model.vocab_size < vocab_size:
        cfg.model.vocab_size = vocab_size
    return cfg


def _entitytext_path(data: Path) -> Path:
    return data / "entitytext.jsonl" if data.is_dir() else data


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import Vocab, load_corpus, load_entitytext
    from .training import train_stage1, train_stage2

    started = time.perf_counter()
    seed = _seed(args)
    out = Path(args.out)
    data = Path(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.stage != args.stage:
        raise UsageError(f"--resume checkpoint is from stage {resume.stage}, not {args.stage}")
    inputs = [data]

    if args.stage == 1:
        records = load_entitytext(_entitytext_path(data))
        if resume is not None:
            cfg, vocab = resume.config, resume.vocab
        else:
            vocab = Vocab.build(" ".join(r.tokens) for r in records)
            cfg = _load_config(args, len(vocab))
        out.mkdir(parents=True, exist_ok=True)
        state = train_stage1(records, cfg, seed, vocab=vocab, state=resume)
    else:
        init = None
        if resume is None:
            if args.init:
                init = load_checkpoint(args.init)
                if init.stage != 1:
                    raise UsageError("--init must point to a stage-1 checkpoint")
                inputs.append(args.init)
            elif not args.no_pretrain:
                raise UsageError("stage 2 needs --init <stage-1 checkpoint> or --no-pretrain")
        if resume is not None:
            cfg, vocab = resume.config, resume.vocab
        elif init is not None:
            vocab = init.vocab
            cfg = _load_config(args, len(vocab))
            cfg.model.vocab_size = init.config.model.vocab_size
            clash = [f for f in SHAPE_FIELDS if getattr(cfg.model, f) != getattr(init.config.model, f)]
            if clash:
                raise UsageError(f"config disagrees with the stage-1 checkpoint on {clash}")
        else:
            vocab = None
            cfg = None
        if vocab is None:
            _, _, vocab = load_corpus(data, max_len=80)
            cfg = _load_config(args, len(vocab))
        _, samples, _ = load_corpus(data, vocab=vocab, max_len=cfg.model.max_text_len, n_max=cfg.model.n_max)
        out.mkdir(parents=True, exist_ok=True)
        state = train_stage2(samples, cfg, seed, init=init, vocab=vocab, state=resume)

    ckpt = out / "checkpoint.zip"
    digest = save_checkpoint(state, ckpt)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        for rec in state.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_manifest(out / "manifest.json", "train", args, seed=seed, config=state.config, inputs=inputs,
                    outputs=[ckpt, log_path], started=started,
                    extra={"stage": args.stage, "checkpoint_sha256": digest, "epochs": state.epoch})
    print(f"stage {args.stage}: {state.epoch} epochs, checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import file_hash, load_checkpoint
    from .data import load_corpus
    from .metrics import dataset_hash, evaluate, write_report
    from .training import configure_determinism

    started = time.perf_counter()
    configure_determinism()
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    _, samples, _ = load_corpus(args.data, vocab=state.vocab, max_len=cfg.model.max_text_len, n_max=cfg.model.n_max)
    report = evaluate(state.model, samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out, cfg, file_hash(args.checkpoint), dataset_hash(samples))
    _write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", args, seed=state.seed, config=cfg,
                    inputs=[args.checkpoint, args.data], outputs=[out], started=started)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def _predict_inputs(path: Path):
    """Corpus directory, ReMeX file, or a single raster with ``--caption``."""
    from .data import load_remex

    if path.is_dir():
        path = path / "remex.json"
    return path.parent, load_remex(path)


def cmd_predict(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import make_sample, read_ppm, tokenize
    from .model import predict_batch
    from .render import svg_overlay
    from .training import configure_determinism

    started = time.perf_counter()
    configure_determinism()
    state = load_checkpoint(args.checkpoint)
    cfg = state.config.model
    src = Path(args.input)
    if src.suffix == ".ppm":
        if not args.caption:
            raise UsageError("a raster input needs --caption")
        root = src.parent
        items = [(src.name, args.caption, None)]
    else:
        root, records = _predict_inputs(src)
        items = [(r.image_ref, r.caption, r) for r in records]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, outputs = [], []
    for k, (ref, caption, rec) in enumerate(items):
        image = read_ppm(root / ref)
        if rec is None:
            # no annotation: a placeholder record only carries the caption
            ids, length = tokenize(caption, state.vocab, cfg.max_text_len)
            sample = _caption_only_sample(ids, length, caption, image)
        else:
            sample = make_sample(rec, image, state.vocab, cfg.max_text_len)
        (pred,) = predict_batch(state.model, [sample])
        _, h, w = image.shape
        entry = {"image_ref": ref, "caption": caption, **pred.to_json(w, h)}
        results.append(entry)
        if args.svg:
            svg_path = out / f"{k:06d}.svg"
            svg_path.write_text(svg_overlay(image, pred.boxes, pred.relations, caption))
            outputs.append(svg_path)
    pred_path = out / "predictions.json"
    pred_path.write_text(json.dumps(results, indent=1) + "\n")
    outputs.insert(0, pred_path)
    _write_manifest(out / "manifest.json", "predict", args, seed=state.seed, config=state.config,
                    inputs=[args.checkpoint, src], outputs=outputs, started=started)
    print(f"wrote {len(results)} predictions to {pred_path}")
    return EXIT_OK


def _caption_only_sample(ids, length, caption, image):
    from .data import EntitySpan, Sample

    # ground truth fields are inert placeholders; prediction never reads them
    return Sample(
        token_ids=ids, length=length, tokens=caption.lower().split()[:length],
        labels=np.zeros(length, dtype=np.int64), image_tensor=image,
        gt_boxes=np.array([[0.5, 0.5, 1.0, 1.0]]), gt_spans=[EntitySpan(0, length - 1)],
        gt_relations=(), gt_entity_count=1,
    )


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="remerec", description="Multi-entity referring expression grounding.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic shapes corpus")
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--max-entities", type=int, default=3)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="check a ReMeX or EntityText file")
    v.add_argument("--format", choices=("remex", "entitytext"), required=True)
    v.add_argument("--n-max", type=int, default=4)
    v.add_argument("--manifest", help="manifest path (default: stderr)")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True, help="corpus directory (or EntityText file for stage 1)")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--init", help="stage-1 checkpoint to start stage 2 from")
    t.add_argument("--resume", help="checkpoint of an interrupted run of the same stage")
    t.add_argument("--no-pretrain", action="store_true", help="allow stage 2 from random weights")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict boxes and relations")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="corpus directory, ReMeX file or .ppm raster")
    r.add_argument("--caption", help="caption for a single raster input")
    r.add_argument("--svg", action="store_true", help="also write one SVG overlay per input")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    from .data import FormatError, ValidationError
    from .training import NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.dump, indent=1), file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, FormatError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
