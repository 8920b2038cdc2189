"""VGG19 convolutional trunk with named taps, and Gram matrices.

Weights are never bundled. A weights file is a safetensors archive with
``conv<b>_<i>.weight`` / ``.bias`` tensors plus a JSON manifest next to it::

    {"source_uri": ..., "checksum": ..., "mean_rgb": [r, g, b], "layer_names": [...]}

Inputs are RGB in [0, 1]; the manifest's ``mean_rgb`` is subtracted before
the first convolution.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BackboneLoadError, ConfigurationError, ContractError
from .tensorio import tensors_checksum

_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


def _layer_table() -> list[tuple[str, str, int]]:
    table, block, idx, ch = [], 1, 1, 3
    for item in _PLAN:
        if item == "M":
            table.append((f"pool{block}", "maxpool2x2", ch))
            block, idx = block + 1, 1
        else:
            ch = item
            table.append((f"conv{block}_{idx}", "conv3x3+relu", ch))
            idx += 1
    return table


LAYER_TABLE: list[tuple[str, str, int]] = _layer_table()
CONV_NAMES = [n for n, kind, _ in LAYER_TABLE if kind.startswith("conv")]
# taps are exposed after the nonlinearity (relu*) or after pooling (pool*)
TAP_NAMES = [n.replace("conv", "relu") if n.startswith("conv") else n for n, _, _ in LAYER_TABLE]
IMAGENET_MEAN_RGB = (0.485, 0.456, 0.406)


class FeatureExtractor(nn.Module):
    """Frozen VGG19 trunk. Call :meth:`features` to get tapped activations."""

    def __init__(self, state: Mapping[str, torch.Tensor], mean_rgb=IMAGENET_MEAN_RGB, checksum: str = "",
                 source_uri: str = ""):
        super().__init__()
        self.convs = nn.ModuleDict()
        in_ch = 3
        for name, kind, ch in LAYER_TABLE:
            if kind.startswith("conv"):
                conv = nn.Conv2d(in_ch, ch, 3, padding=1)
                conv.weight.data.copy_(state[f"{name}.weight"])
                conv.bias.data.copy_(state[f"{name}.bias"])
                self.convs[name] = conv
                in_ch = ch
        self.register_buffer("mean", torch.tensor(mean_rgb, dtype=torch.float32).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()
        self.checksum = checksum
        self.source_uri = source_uri

    @property
    def mean_rgb(self) -> list[float]:
        return self.mean.flatten().tolist()

    def features(self, x: torch.Tensor, taps: Iterable[str]) -> dict[str, torch.Tensor]:
        """Activations at ``taps`` for a (N, 3, H, W) batch in [0, 1].

        Runs only as deep as the deepest requested tap. Gradients flow to ``x``
        when it requires them; the weights never change.
        """
        taps = set(taps)
        unknown = taps - set(TAP_NAMES)
        if unknown:
            raise ContractError(f"unknown tap(s) {sorted(unknown)}; valid: {TAP_NAMES}")
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        deepest = max(TAP_NAMES.index(t) for t in taps) if taps else -1
        pools_needed = sum(1 for t in TAP_NAMES[: deepest + 1] if t.startswith("pool"))
        if min(x.shape[-2:]) < 2 ** pools_needed:
            raise ContractError(f"input {tuple(x.shape[-2:])} too small for tap {TAP_NAMES[deepest]}")
        out: dict[str, torch.Tensor] = {}
        h = x - self.mean.to(x.dtype)
        for i, (name, kind, _) in enumerate(LAYER_TABLE[: deepest + 1]):
            if kind.startswith("conv"):
                h = F.relu(self.convs[name](h))
            else:
                h = F.max_pool2d(h, 2)
            tap = TAP_NAMES[i]
            if tap in taps:
                out[tap] = h
        return out

    def forward(self, x, taps=("relu3_3",)):
        return self.features(x, taps)


def gram(f: torch.Tensor) -> torch.Tensor:
    """Gram matrix F F^T / (C H W) of a (C,H,W) or (N,C,H,W) feature map."""
    if f.ndim == 3:
        return gram(f.unsqueeze(0))[0]
    n, c, h, w = f.shape
    if min(c, h, w) < 1:
        raise ContractError("feature map dimensions must be >= 1")
    flat = f.reshape(n, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


# --- weights files ----------------------------------------------------------


def manifest_path(weights) -> Path:
    return Path(weights).with_suffix(".json")


def random_vgg19_state(seed: int = 0) -> dict[str, torch.Tensor]:
    """He-initialised VGG19 trunk (fan-out, zero bias), deterministic in ``seed``."""
    g = torch.Generator().manual_seed(seed)
    state, in_ch = {}, 3
    for name, kind, ch in LAYER_TABLE:
        if kind.startswith("conv"):
            std = (2.0 / (ch * 9)) ** 0.5
            state[f"{name}.weight"] = torch.randn(ch, in_ch, 3, 3, generator=g) * std
            state[f"{name}.bias"] = torch.zeros(ch)
            in_ch = ch
    return state


def from_torchvision_state(sd: Mapping[str, torch.Tensor], std_rgb=(0.229, 0.224, 0.225)) -> dict[str, torch.Tensor]:
    """Rename torchvision ``features.<i>`` keys and fold the input std into conv1_1."""
    state = {}
    tv_index = 0
    for name, kind, _ in LAYER_TABLE:
        if kind.startswith("conv"):
            state[f"{name}.weight"] = sd[f"features.{tv_index}.weight"].clone()
            state[f"{name}.bias"] = sd[f"features.{tv_index}.bias"].clone()
            tv_index += 2  # conv, relu
        else:
            tv_index += 1
    std = torch.tensor(std_rgb).view(1, 3, 1, 1)
    state["conv1_1.weight"] = state["conv1_1.weight"] / std
    return state


def write_weights(path, state: Mapping[str, torch.Tensor], mean_rgb=IMAGENET_MEAN_RGB, source_uri: str = "") -> Path:
    from safetensors.torch import save_file

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {k: v.detach().to(torch.float32).contiguous() for k, v in state.items()}
    save_file(flat, str(path))
    manifest = {
        "source_uri": source_uri,
        "checksum": tensors_checksum(flat),
        "mean_rgb": [float(m) for m in mean_rgb],
        "layer_names": CONV_NAMES,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _truncated_layer(path: Path) -> str | None:
    """Name of the first tensor whose bytes lie beyond the end of a truncated safetensors file."""
    raw = path.read_bytes()
    if len(raw) < 8:
        return None
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        return None
    header = json.loads(raw[8 : 8 + hlen])
    available = len(raw) - 8 - hlen
    entries = sorted(
        ((k, v) for k, v in header.items() if k != "__metadata__"), key=lambda kv: kv[1]["data_offsets"][1]
    )
    for k, v in entries:
        if v["data_offsets"][1] > available:
            return k
    return None


def load_backbone(weights) -> FeatureExtractor:
    """Load a VGG19 trunk from a safetensors file (or its JSON manifest)."""
    from safetensors import SafetensorError
    from safetensors.torch import load_file

    weights = Path(weights)
    if weights.suffix == ".json":
        weights = weights.with_suffix(".safetensors")
    if not weights.exists():
        raise ConfigurationError(f"backbone weights not found: {weights}")
    mpath = manifest_path(weights)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    try:
        state = load_file(str(weights))
    except (SafetensorError, OSError, ValueError, json.JSONDecodeError) as exc:
        layer = _truncated_layer(weights)
        where = f" (first unreadable tensor: {layer})" if layer else ""
        raise BackboneLoadError(f"{weights}: cannot read weights{where}: {exc}", layer=layer) from exc

    in_ch = 3
    for name, kind, ch in LAYER_TABLE:
        if not kind.startswith("conv"):
            continue
        for suffix, shape in ((".weight", (ch, in_ch, 3, 3)), (".bias", (ch,))):
            key = name + suffix
            if key not in state:
                raise BackboneLoadError(f"{weights}: missing tensor {key}", layer=name)
            if tuple(state[key].shape) != shape:
                raise BackboneLoadError(
                    f"{weights}: {key} has shape {tuple(state[key].shape)}, expected {shape}", layer=name
                )
        in_ch = ch
    checksum = tensors_checksum(state)
    if manifest.get("checksum") and manifest["checksum"] != checksum:
        raise BackboneLoadError(f"{weights}: checksum mismatch against {mpath.name}")
    mean = manifest.get("mean_rgb", IMAGENET_MEAN_RGB)
    return FeatureExtractor(state, mean, checksum, manifest.get("source_uri", ""))
