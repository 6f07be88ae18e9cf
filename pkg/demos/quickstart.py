"""Synthesize a small corpus, train both stages briefly, predict and render.

A few minutes on one core. The model is far from converged at this budget;
the point is the file flow. ``demos/desk_pipeline.sh`` runs the full
desk-scale schedule.
"""
import json
import sys
import tempfile
from pathlib import Path

from remerec.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="remerec_demo_"))
config = work / "small.json"
work.mkdir(parents=True, exist_ok=True)
config.write_text(json.dumps({"train": {"stage1_epochs": 5, "stage2_epochs": 5}}))


def run(*args):
    print("$ remerec", " ".join(args))
    code = main(list(args))
    if code:
        sys.exit(code)


run("synth", "--seed", "1", "--n", "400", "--max-entities", "3", "--out", str(work / "train"))
run("synth", "--seed", "2", "--n", "40", "--max-entities", "3", "--out", str(work / "test"))
run("validate", "--format", "remex", str(work / "train" / "remex.json"))
run("train", "--stage", "1", "--data", str(work / "train"), "--config", str(config), "--out", str(work / "s1"))
run("train", "--stage", "2", "--data", str(work / "train"), "--config", str(config),
    "--init", str(work / "s1" / "checkpoint.zip"), "--out", str(work / "s2"))
run("eval", "--checkpoint", str(work / "s2" / "checkpoint.zip"), "--data", str(work / "test"),
    "--out", str(work / "report.json"))
run("predict", "--checkpoint", str(work / "s2" / "checkpoint.zip"), "--input", str(work / "test"),
    "--svg", "--out", str(work / "pred"))

report = json.loads((work / "report.json").read_text())
print({k: report[k] for k in ("grounding_acc", "relation_level_rel_acc", "entity_count_acc")})
first = json.loads((work / "pred" / "predictions.json").read_text())[0]
print("first prediction:", first)
print("overlays in", work / "pred")
