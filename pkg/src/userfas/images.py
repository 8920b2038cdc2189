"""In-memory image convention: float32 arrays of shape (H, W, 3) in [0, 1].

On disk images are 8-bit sRGB PNG.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
import torch
from PIL import Image

from .errors import ContractError, IngestIOError


def as_image(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    return arr


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise IngestIOError(path, str(exc)) from exc
    return from_uint8(arr)


def save_png(img: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    return path


def resize_bilinear(img: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    width = height if width is None else width
    img = as_image(img)
    if img.shape[:2] == (height, width):
        return img.copy()
    out = cv2.resize(img, (width, height), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


def to_tensor(images: np.ndarray | Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """(H,W,3) or (N,H,W,3) arrays -> (N,3,H,W) tensor."""
    arr = np.asarray(images, dtype=np.float32) if not isinstance(images, np.ndarray) else images
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(N,3,H,W) or (3,H,W) tensor -> float32 (N,H,W,3) / (H,W,3) array."""
    arr = t.detach().cpu().to(torch.float32).numpy()
    if arr.ndim == 3:
        return arr.transpose(1, 2, 0).copy()
    return arr.transpose(0, 2, 3, 1).copy()


def hash_images(images: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for img in images:
        q = to_uint8(img)
        h.update(str(q.shape).encode())
        h.update(q.tobytes())
    return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
