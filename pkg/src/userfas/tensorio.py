"""Named-tensor archives (safetensors) with JSON sidecars."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import torch
from safetensors.torch import load_file, save_file


def tensors_checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    """sha256 over names, dtypes, shapes and raw bytes in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def sidecar_path(archive) -> Path:
    return Path(archive).with_suffix(".json")


def write_json(path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


def save_archive(path, tensors: Mapping[str, torch.Tensor], meta: dict) -> Path:
    """Write ``path`` (.safetensors) and its ``.json`` sidecar; returns archive path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {k: v.detach().cpu().contiguous() for k, v in tensors.items()}
    save_file(flat, str(path))
    meta = dict(meta)
    meta["checksum"] = tensors_checksum(flat)
    write_json(sidecar_path(path), meta)
    return path


def load_archive(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    tensors = load_file(str(path))
    meta = read_json(sidecar_path(path)) if sidecar_path(path).exists() else {}
    return tensors, meta


def stable_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()
