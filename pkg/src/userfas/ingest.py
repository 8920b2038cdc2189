"""Frame harvesting, face cropping, manifests and deterministic splits."""
from __future__ import annotations

import json
import logging
import math
import random
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import cv2
import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DuplicateRecordError,
    EmptySourceError,
    IngestIOError,
    ManifestError,
)
from .images import as_image, from_uint8, load_image, resize_bilinear, save_png

log = logging.getLogger(__name__)

LABELS = ("live", "spoof")
ATTACK_TYPES = ("none", "print", "phone", "monitor", "tablet")
SPLITS = ("train", "test", "unassigned")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
VIDEO_SUFFIXES = {".mp4", ".avi", ".mov", ".mkv", ".webm", ".mpg", ".mpeg"}
# synthetic spoofs live next to the crops but are not part of the manifest
RESERVED_DIRS = {"synthetic"}


@dataclass(frozen=True)
class SampleRecord:
    subject_id: str
    video_id: str
    frame_index: int
    label: str
    attack_type: str
    split: str
    path: str  # relative to the manifest root, posix separators

    def __post_init__(self):
        if self.label not in LABELS:
            raise ContractError(f"bad label {self.label!r}")
        if self.attack_type not in ATTACK_TYPES:
            raise ContractError(f"bad attack_type {self.attack_type!r}")
        if (self.label == "live") != (self.attack_type == "none"):
            raise ContractError(
                f"label {self.label!r} inconsistent with attack_type {self.attack_type!r}"
            )
        if self.split not in SPLITS:
            raise ContractError(f"bad split {self.split!r}")
        if self.frame_index < 0:
            raise ContractError("frame_index must be non-negative")


def style_id_of(record: SampleRecord) -> str:
    """Spoof style grouping: ``<attack_type>-<medium>``, medium = video_id prefix before '-'."""
    medium = record.video_id.split("-", 1)[0]
    return f"{record.attack_type}-{medium}"


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    root: str
    seed: int
    warnings: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, dict[str, int]]:
        tally: dict[str, dict[str, int]] = {}
        for r in self.records:
            tally.setdefault(r.subject_id, {"live": 0, "spoof": 0})[r.label] += 1
        return tally

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def abspath(self, record: SampleRecord) -> Path:
        return Path(self.root) / record.path

    def select(self, subject=None, label=None, split=None) -> list[SampleRecord]:
        return [
            r
            for r in self.records
            if (subject is None or r.subject_id == subject)
            and (label is None or r.label == label)
            and (split is None or r.split == split)
        ]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "root": self.root,
            "records": [asdict(r) for r in self.records],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            records = [SampleRecord(**r) for r in obj["records"]]
            return cls(records, obj["root"], int(obj["seed"]), list(obj.get("warnings", [])))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{path}: {exc}") from exc
        return cls.from_json(obj)


@dataclass(frozen=True)
class CropSpec:
    output_size: int = 256
    margin: float = 0.1
    detector: str = "full-frame"

    def __post_init__(self):
        if self.output_size <= 0:
            raise ContractError("output_size must be positive")
        if not 0 <= self.margin < 1:
            raise ContractError("margin must satisfy 0 <= margin < 1")


@dataclass
class CropStats:
    cropped: int = 0
    skipped: int = 0


# --- face detectors ---------------------------------------------------------

Box = tuple[float, float, float, float]  # x0, y0, x1, y1 in pixels
Detector = Callable[[np.ndarray], "Box | None"]


def full_frame_detector(image: np.ndarray) -> Box | None:
    """Treats the whole frame as the face; blank (constant) frames count as no face."""
    if float(image.max() - image.min()) < 1e-6:
        return None
    h, w = image.shape[:2]
    return (0.0, 0.0, float(w), float(h))


_DETECTORS: dict[str, Detector] = {"full-frame": full_frame_detector}


def register_detector(name: str, fn: Detector) -> None:
    _DETECTORS[name] = fn


def get_detector(name: str) -> Detector:
    try:
        return _DETECTORS[name]
    except KeyError:
        raise ConfigurationError(
            f"face detector {name!r} is not available (known: {sorted(_DETECTORS)})"
        ) from None


# --- frames and crops -------------------------------------------------------


def _frame_key(p: Path):
    return (0, int(p.stem)) if p.stem.isdigit() else (1, p.stem)


def extract_frames(video, stride: int = 1) -> list[np.ndarray]:
    """Decode frames 0, stride, 2*stride, ... from a video file or a directory of frame images."""
    if not isinstance(stride, int) or stride < 1:
        raise ContractError(f"stride must be a positive integer, got {stride!r}")
    video = Path(video)
    frames: list[np.ndarray] = []
    if video.is_dir():
        files = sorted((p for p in video.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_frame_key)
        frames = [load_image(p) for p in files[::stride]]
    else:
        if not video.exists():
            raise IngestIOError(video, "no such file")
        cap = cv2.VideoCapture(str(video))
        if not cap.isOpened():
            raise IngestIOError(video)
        idx = 0
        try:
            while True:
                ok, bgr = cap.read()
                if not ok:
                    break
                if idx % stride == 0:
                    frames.append(from_uint8(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)))
                idx += 1
        finally:
            cap.release()
    if not frames:
        raise EmptySourceError(f"{video}: no frames")
    return frames


def crop_box(box: Box, image_hw: tuple[int, int], margin: float) -> tuple[int, int, int, int]:
    """Expand ``box`` by margin x box-dimension per side and clamp; returns integer (x0, y0, x1, y1)."""
    h, w = image_hw
    x0, y0, x1, y1 = box
    bw, bh = x1 - x0, y1 - y0
    ex0 = max(0, int(math.floor(x0 - margin * bw)))
    ey0 = max(0, int(math.floor(y0 - margin * bh)))
    ex1 = min(w, int(math.ceil(x1 + margin * bw)))
    ey1 = min(h, int(math.ceil(y1 + margin * bh)))
    if ex1 <= ex0 or ey1 <= ey0:
        raise ContractError(f"degenerate crop for box {box} in image {image_hw}")
    return ex0, ey0, ex1, ey1


def detect_and_crop(
    image: np.ndarray,
    spec: CropSpec = CropSpec(),
    stats: CropStats | None = None,
    detector: Detector | None = None,
) -> np.ndarray | None:
    image = as_image(image)
    detect = detector or get_detector(spec.detector)
    box = detect(image)
    if box is None:
        if stats is not None:
            stats.skipped += 1
        log.debug("no face detected; frame skipped")
        return None
    x0, y0, x1, y1 = crop_box(box, image.shape[:2], spec.margin)
    crop = resize_bilinear(image[y0:y1, x0:x1], spec.output_size)
    if stats is not None:
        stats.cropped += 1
    return crop


# --- source tree -> crop tree ----------------------------------------------


@dataclass(frozen=True)
class SourceItem:
    subject_id: str
    label: str
    attack_type: str
    video_id: str
    path: Path


def _visible_dirs(path: Path) -> list[Path]:
    return sorted(p for p in path.iterdir() if p.is_dir() and not p.name.startswith("."))


def _is_source(p: Path) -> bool:
    if p.is_dir():
        return any(c.suffix.lower() in IMAGE_SUFFIXES for c in p.iterdir())
    return p.suffix.lower() in VIDEO_SUFFIXES


def discover_sources(src) -> list[SourceItem]:
    """Walk ``src/<subject>/<live|spoof>/[<attack_type>/]<video file | frame dir>``."""
    src = Path(src)
    items = []
    for subj in _visible_dirs(src):
        for label_dir in _visible_dirs(subj):
            if label_dir.name in RESERVED_DIRS:
                continue
            if label_dir.name not in LABELS:
                raise ManifestError(f"{label_dir}: expected 'live' or 'spoof'")
            if label_dir.name == "live":
                groups = [("none", label_dir)]
            else:
                groups = []
                for at in sorted(p for p in label_dir.iterdir() if p.is_dir()):
                    if at.name not in ATTACK_TYPES[1:]:
                        raise ManifestError(f"{at}: unknown attack type {at.name!r}")
                    groups.append((at.name, at))
            for attack, gdir in groups:
                for v in sorted(gdir.iterdir()):
                    if _is_source(v):
                        vid = v.name if v.is_dir() else v.stem
                        items.append(SourceItem(subj.name, label_dir.name, attack, vid, v))
    return items


def crop_relpath(subject: str, label: str, attack: str, video: str, frame: int) -> str:
    parts = [subject, label] + ([attack] if label == "spoof" else []) + [video, f"{frame:05d}.png"]
    return "/".join(parts)


def ingest_tree(src, out, spec: CropSpec = CropSpec(), stride: int = 1, jobs: int = 1) -> CropStats:
    """Extract, crop and materialise every source video; returns crop/skip tallies."""
    items = discover_sources(src)
    out = Path(out)
    total = CropStats()

    def work(item: SourceItem) -> CropStats:
        stats = CropStats()
        for i, frame in enumerate(extract_frames(item.path, stride)):
            crop = detect_and_crop(frame, spec, stats)
            if crop is not None:
                rel = crop_relpath(item.subject_id, item.label, item.attack_type, item.video_id, i * stride)
                save_png(crop, out / rel)
        if stats.skipped:
            log.info("%s: skipped %d frame(s) without a face", item.path, stats.skipped)
        return stats

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    for s in results:
        total.cropped += s.cropped
        total.skipped += s.skipped
    return total


_FRAME_RE = re.compile(r"^\d+$")


def build_manifest(root, seed: int = 0) -> DatasetManifest:
    """Catalogue the crop tree under ``root``; records sorted by (subject, video, frame)."""
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"{root}: crop root does not exist")
    records = []
    seen: dict[tuple[str, str, int], Path] = {}
    video_label: dict[tuple[str, str], tuple[str, str]] = {}
    for subj in _visible_dirs(root):
        for label_dir in _visible_dirs(subj):
            if label_dir.name in RESERVED_DIRS:
                continue
            if label_dir.name not in LABELS:
                raise ManifestError(f"{label_dir}: expected 'live' or 'spoof'")
            if label_dir.name == "live":
                groups = [("none", label_dir)]
            else:
                groups = []
                for at in sorted(label_dir.iterdir()):
                    if not at.is_dir() or at.name not in ATTACK_TYPES[1:]:
                        raise ManifestError(f"{at}: expected an attack-type directory")
                    groups.append((at.name, at))
            for attack, gdir in groups:
                for vdir in sorted(gdir.iterdir()):
                    if not vdir.is_dir():
                        raise ManifestError(f"{vdir}: expected a video directory")
                    key = (subj.name, vdir.name)
                    if key in video_label and video_label[key] != (label_dir.name, attack):
                        raise DuplicateRecordError(f"{vdir}: video id reused for subject {subj.name}")
                    video_label[key] = (label_dir.name, attack)
                    for f in sorted(vdir.iterdir()):
                        if f.suffix.lower() != ".png" or not _FRAME_RE.match(f.stem):
                            raise ManifestError(f"{f}: expected <frame_index>.png")
                        idx = int(f.stem)
                        rk = (subj.name, vdir.name, idx)
                        if rk in seen:
                            raise DuplicateRecordError(f"{f}: duplicates frame {idx} ({seen[rk]})")
                        seen[rk] = f
                        records.append(
                            SampleRecord(
                                subject_id=subj.name,
                                video_id=vdir.name,
                                frame_index=idx,
                                label=label_dir.name,
                                attack_type=attack,
                                split="unassigned",
                                path=f.relative_to(root).as_posix(),
                            )
                        )
    records.sort(key=lambda r: (r.subject_id, r.video_id, r.frame_index))
    return DatasetManifest(records, str(root), seed)


# --- splitting and sampling -------------------------------------------------


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_holdout(manifest: DatasetManifest, train_fraction: float = 0.7, seed: int = 0) -> DatasetManifest:
    """Video-atomic per-(subject, label) holdout split."""
    if not 0 < train_fraction < 1:
        raise ContractError("train_fraction must lie in (0, 1)")
    target = Fraction(train_fraction)
    frames: dict[tuple[str, str], Counter] = defaultdict(Counter)
    for r in manifest.records:
        frames[(r.subject_id, r.label)][r.video_id] += 1

    assignment: dict[tuple[str, str], str] = {}
    warnings = list(manifest.warnings)
    for (subject, label), per_video in sorted(frames.items()):
        videos = sorted(per_video)
        rng = random.Random(f"{seed}/{subject}/{label}")
        rng.shuffle(videos)
        total = sum(per_video.values())
        if len(videos) == 1:
            msg = f"subject {subject} has a single {label} video; assigned to train (no test data, leakage risk)"
            log.warning(msg)
            warnings.append(msg)
        in_train = 0
        for v in videos:
            if Fraction(in_train, total) < target:
                assignment[(subject, v)] = "train"
                in_train += per_video[v]
            else:
                assignment[(subject, v)] = "test"
    records = [replace(r, split=assignment[(r.subject_id, r.video_id)]) for r in manifest.records]
    return DatasetManifest(records, manifest.root, seed, warnings)


def sample_style_sources(manifest: DatasetManifest, fraction: float = 0.1, seed: int = 0) -> list[SampleRecord]:
    """Per-subject uniform sample (no replacement) of live train records."""
    if not 0 < fraction <= 1:
        raise ContractError("fraction must lie in (0, 1]")
    if any(r.split == "unassigned" for r in manifest.records):
        raise ContractError("manifest has unassigned records; run split_holdout first")
    out: list[SampleRecord] = []
    for subject in manifest.subjects:
        pool = manifest.select(subject=subject, label="live", split="train")
        if not pool:
            log.warning("subject %s has no live train records; skipped", subject)
            continue
        k = round_half_up(fraction * len(pool))
        rng = random.Random(f"{seed}/{subject}/style-sources")
        out.extend(sorted(rng.sample(pool, k), key=lambda r: (r.video_id, r.frame_index)))
    return out
