"""Checkpoints: a torch state-dict blob plus a JSON sidecar describing how to rebuild the model."""
from __future__ import annotations

import json
from pathlib import Path

import torch

from .encoder import UntrainedModelError

FORMAT_VERSION = 1


def _paths(path):
    p = Path(path)
    if p.suffix in (".pt", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".pt"), p.with_suffix(".json")


def save(model, path, cfg, iteration: int, extra: dict | None = None) -> Path:
    blob, side = _paths(path)
    blob.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), blob)
    meta = {
        "format_version": FORMAT_VERSION,
        "k": model.encoder.cfg.k,
        "image_size": model.encoder.cfg.image_size,
        "architecture_hash": model.encoder.architecture_hash(),
        "seed": cfg.seed,
        "iteration": int(iteration),
        "config": cfg.to_dict(),
    }
    if extra:
        meta.update(extra)
    side.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return blob


def read_meta(path) -> dict:
    _, side = _paths(path)
    return json.loads(side.read_text())


def load(path, allow_untrained: bool = False):
    """Rebuild an AutoEncoder; refuses iteration-0 checkpoints unless ``allow_untrained``."""
    from .training import AutoEncoder

    blob, side = _paths(path)
    if not blob.exists() or not side.exists():
        raise FileNotFoundError(f"checkpoint {blob} or its sidecar {side} is missing")
    meta = json.loads(side.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
    model = AutoEncoder(meta["k"], meta["image_size"])
    if model.encoder.architecture_hash() != meta["architecture_hash"]:
        raise ValueError("checkpoint architecture hash does not match this code version")
    model.load_state_dict(torch.load(blob, map_location="cpu", weights_only=True))
    model.iteration = meta["iteration"]
    model.encoder.iteration = meta["iteration"]
    if meta["iteration"] <= 0 and not allow_untrained:
        raise UntrainedModelError(f"{blob} holds untrained parameters (iteration 0)")
    model.eval()
    return model, meta
