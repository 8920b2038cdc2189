"""Synthetic source videos for hermetic end-to-end runs.

Live frames are procedurally drawn faces. Spoof frames re-render live-style
frames through a recapture simulation: downscale/upscale blur, a colour shift
and a periodic luminance grating. Each spoof style has its own parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .images import save_png


@dataclass(frozen=True)
class SpoofStyle:
    attack_type: str
    medium: str
    scale: float        # recapture downscale factor
    gain: tuple         # per-channel colour gain
    offset: tuple       # per-channel colour offset
    period: float       # grating period in pixels
    angle: float        # grating orientation in radians
    amplitude: float    # grating luminance amplitude

    @property
    def style_id(self) -> str:
        return f"{self.attack_type}-{self.medium}"


SIW_LIKE_STYLES = (
    SpoofStyle("print", "m1", 0.50, (1.08, 0.98, 0.85), (0.04, 0.02, 0.00), 7.0, 0.0, 0.05),
    SpoofStyle("print", "m2", 0.40, (1.12, 1.00, 0.80), (0.06, 0.03, 0.00), 5.0, 0.8, 0.06),
    SpoofStyle("phone", "m1", 0.45, (0.90, 1.00, 1.12), (0.00, 0.02, 0.06), 3.0, 1.57, 0.08),
    SpoofStyle("phone", "m2", 0.35, (0.88, 0.96, 1.15), (0.00, 0.00, 0.08), 4.0, 0.4, 0.07),
    SpoofStyle("monitor", "m1", 0.50, (0.95, 1.05, 1.10), (0.02, 0.04, 0.06), 3.5, 0.0, 0.10),
    SpoofStyle("monitor", "m2", 0.40, (0.92, 1.08, 1.05), (0.03, 0.05, 0.03), 2.5, 1.2, 0.09),
    SpoofStyle("monitor", "m3", 0.55, (1.00, 1.10, 1.10), (0.00, 0.03, 0.05), 6.0, 2.0, 0.08),
    SpoofStyle("tablet", "m1", 0.45, (0.92, 0.95, 1.08), (0.05, 0.05, 0.08), 3.0, 0.6, 0.09),
    SpoofStyle("tablet", "m2", 0.50, (1.05, 0.95, 1.05), (0.04, 0.00, 0.04), 4.5, 1.0, 0.07),
    SpoofStyle("tablet", "m3", 0.38, (0.90, 0.90, 1.00), (0.08, 0.08, 0.10), 2.8, 2.4, 0.10),
)


def draw_face(size: int, rng: np.random.Generator, skin, background, jitter: float = 2.0) -> np.ndarray:
    """One frame: textured background, skin ellipse, eyes, mouth, mild sensor noise."""
    img = np.empty((size, size, 3), np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    img[:] = background
    img += 0.04 * np.sin(xx / size * 6.0 + rng.uniform(0, 6))[..., None]
    cx = size / 2 + rng.normal(0, jitter)
    cy = size / 2 + rng.normal(0, jitter)
    ax, ay = size * 0.30, size * 0.40
    face = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1
    img[face] = skin
    shade = np.clip(1 - 0.25 * (((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2), 0.75, 1)
    img[face] *= shade[face][:, None]
    c = lambda v: int(round(v))
    dark = (0.12, 0.08, 0.06)
    for dx in (-0.13, 0.13):
        cv2.circle(img, (c(cx + dx * size), c(cy - 0.08 * size)), max(1, c(size * 0.035)), dark, -1)
    cv2.ellipse(img, (c(cx), c(cy + 0.17 * size)), (c(size * 0.09), max(1, c(size * 0.025))), 0, 0, 360,
                (0.55, 0.2, 0.2), -1)
    img += rng.normal(0, 0.01, img.shape).astype(np.float32)
    return np.clip(img, 0, 1)


def recapture(img: np.ndarray, style: SpoofStyle, phase: float = 0.0) -> np.ndarray:
    h, w = img.shape[:2]
    small = cv2.resize(img, (max(2, int(w * style.scale)), max(2, int(h * style.scale))),
                       interpolation=cv2.INTER_AREA)
    out = cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)
    out = out * np.asarray(style.gain, np.float32) + np.asarray(style.offset, np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    u = xx * np.cos(style.angle) + yy * np.sin(style.angle)
    out = out + style.amplitude * np.sin(2 * np.pi * u / style.period + phase)[..., None]
    return np.clip(out, 0, 1).astype(np.float32)


def make_dataset(out, n_subjects: int = 4, live_videos: int = 10, frames_per_video: int = 10,
                 styles=SIW_LIKE_STYLES, spoof_frames_per_video: int = 10, size: int = 64, seed: int = 0,
                 as_video: bool = False) -> Path:
    """Write ``out/<subject>/<live|spoof>/[<attack>/]<video>/<frame>.png`` (or .avi files)."""
    out = Path(out)
    rng = np.random.default_rng(seed)
    for s in range(n_subjects):
        subject = f"s{s:03d}"
        skin = rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6]).astype(np.float32)
        for v in range(live_videos):
            bg = rng.uniform(0.2, 0.8, 3).astype(np.float32)
            frames = [draw_face(size, rng, skin, bg) for _ in range(frames_per_video)]
            _write(frames, out / subject / "live" / f"v{v:02d}", as_video)
        for style in styles:
            bg = rng.uniform(0.2, 0.8, 3).astype(np.float32)
            frames = [recapture(draw_face(size, rng, skin, bg), style, rng.uniform(0, 2 * np.pi))
                      for _ in range(spoof_frames_per_video)]
            _write(frames, out / subject / "spoof" / style.attack_type / f"{style.medium}-{style.attack_type}", as_video)
    return out


def _write(frames, target: Path, as_video: bool):
    if as_video:
        target.parent.mkdir(parents=True, exist_ok=True)
        h, w = frames[0].shape[:2]
        writer = cv2.VideoWriter(str(target.with_suffix(".avi")), cv2.VideoWriter_fourcc(*"MJPG"), 10, (w, h))
        for f in frames:
            writer.write(cv2.cvtColor((np.clip(f, 0, 1) * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR))
        writer.release()
    else:
        for i, f in enumerate(frames):
            save_png(f, target / f"{i}.png")
