"""Checkpoint archives.

A checkpoint is a zip file holding one ``.npy`` array per parameter, keyed by
module path, the optimizer moments and a ``manifest.json`` with the run
configuration, seed, stage, epoch, vocabulary and loss log (without
timings). Entries carry a fixed timestamp so identical states produce
identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import Vocab
from .training import TrainState, build_model, make_optimizer

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.array(arr, order="C", copy=True), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(state: TrainState, path) -> str:
    """Write ``state`` to ``path``; returns the sha256 of the archive."""
    model, opt = state.model, state.optimizer
    names = {id(p): n for n, p in model.named_parameters()}
    osd = opt.state_dict()
    groups = []
    for g, group in zip(osd["param_groups"], opt.param_groups):
        meta = {k: v for k, v in g.items() if k != "params"}
        meta["params"] = [names[id(p)] for p in group["params"]]
        groups.append(meta)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "seed": state.seed,
        "stage": state.stage,
        "epoch": state.epoch,
        "vocab": state.vocab.itos,
        # wall_time is left out so identical runs give identical archives
        "log": [{k: v for k, v in r.items() if k != "wall_time"} for r in state.log],
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "optimizer": {"param_groups": groups},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for name, tensor in model.state_dict().items():
            _write(zf, f"params/{name}.npy", _npy_bytes(tensor.detach().cpu().numpy()))
        # optimizer state indices follow the flattened group order
        flat = [p for group in opt.param_groups for p in group["params"]]
        for idx, slot in sorted(osd["state"].items()):
            pname = names[id(flat[idx])]
            for key, value in sorted(slot.items()):
                arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                _write(zf, f"optim/{pname}/{key}.npy", _npy_bytes(arr))
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_npy(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    return np.load(io.BytesIO(zf.read(name)), allow_pickle=False)


def load_checkpoint(path) -> TrainState:
    """Rebuild a :class:`TrainState` whose next step matches the saved run."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
        cfg = RunConfig.from_dict(manifest["config"])
        dtype = getattr(torch, manifest["dtype"])
        model = build_model(cfg.model, manifest["seed"], dtype)
        sd = model.state_dict()
        for name in sd:
            sd[name] = torch.from_numpy(_read_npy(zf, f"params/{name}.npy"))
        model.load_state_dict(sd)
        stage = manifest["stage"]
        opt = make_optimizer(model, stage, cfg)
        params = dict(model.named_parameters())
        groups = manifest["optimizer"]["param_groups"]
        osd = {"state": {}, "param_groups": []}
        idx = 0
        entries = set(zf.namelist())
        for group, meta in zip(opt.param_groups, groups):
            if [id(params[n]) for n in meta["params"]] != [id(p) for p in group["params"]]:
                raise ValueError(f"{path}: optimizer layout does not match the model")
            ids = []
            for pname in meta["params"]:
                slot = {}
                for key in ("step", "exp_avg", "exp_avg_sq", "max_exp_avg_sq"):
                    entry = f"optim/{pname}/{key}.npy"
                    if entry in entries:
                        slot[key] = torch.from_numpy(_read_npy(zf, entry))
                if slot:
                    osd["state"][idx] = slot
                ids.append(idx)
                idx += 1
            g = {k: v for k, v in meta.items() if k != "params"}
            g["params"] = ids
            osd["param_groups"].append(g)
        opt.load_state_dict(osd)
    return TrainState(
        model=model,
        optimizer=opt,
        config=cfg,
        vocab=Vocab(manifest["vocab"][2:]),
        seed=manifest["seed"],
        stage=stage,
        epoch=manifest["epoch"],
        log=[{**r, "wall_time": None} for r in manifest["log"]],
    )
