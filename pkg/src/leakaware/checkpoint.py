"""Portable checkpoints: name-indexed tensors (safetensors) plus a JSON sidecar.

``<stem>.safetensors`` holds every state-dict tensor, including batch-norm
running statistics. ``<stem>.json`` holds the format version, the ModelConfig
and free-form training metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

from safetensors.torch import load_file, save_file

from .model import FusionNet, ModelConfig

FORMAT = "leakaware-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".safetensors") else p
    return stem.with_suffix(".safetensors"), stem.with_suffix(".json")


def save_checkpoint(model: FusionNet, path, metadata: dict | None = None) -> Path:
    tensor_path, meta_path = _paths(path)
    tensor_path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    save_file(state, str(tensor_path))
    sidecar = {
        "format": FORMAT,
        "version": VERSION,
        "tensors": tensor_path.name,
        "model_config": model.config.to_dict(),
        "metadata": metadata or {},
    }
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return meta_path


def load_checkpoint(path) -> tuple[FusionNet, dict]:
    tensor_path, meta_path = _paths(path)
    if not meta_path.exists() or not tensor_path.exists():
        raise CheckpointError(f"checkpoint not found at {meta_path} / {tensor_path}")
    sidecar = json.loads(meta_path.read_text())
    if sidecar.get("format") != FORMAT:
        raise CheckpointError(f"{meta_path} is not a {FORMAT} sidecar")
    if sidecar.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {sidecar.get('version')}")
    config = ModelConfig.from_dict(sidecar["model_config"])
    model = FusionNet(config)
    try:
        model.load_state_dict(load_file(str(tensor_path)))
    except RuntimeError as exc:
        raise CheckpointError(f"{tensor_path}: tensors do not match the stored config: {exc}") from None
    model.eval()
    return model, sidecar.get("metadata", {})
