"""Style bank construction and per-subject synthetic spoof generation."""
from __future__ import annotations

import hashlib
import logging
import random
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .backbone import FeatureExtractor
from .errors import ContractError, UserFASError
from .images import load_image, save_png
from .ingest import DatasetManifest, SampleRecord, sample_style_sources, style_id_of
from .style import (
    LossWeights,
    StyleModel,
    StyleReference,
    StyleTrainConfig,
    stylize,
    train_style_model,
)
from .tensorio import read_json, write_json

log = logging.getLogger(__name__)


class MissingStylesError(UserFASError):
    def __init__(self, subject, missing):
        super().__init__(f"subject {subject} lacks spoof style(s): {', '.join(sorted(missing))}")
        self.missing = sorted(missing)


@dataclass
class StyleBank:
    source_subject: str
    references: list[StyleReference]
    models: dict[str, StyleModel] = field(default_factory=dict)

    @property
    def style_ids(self) -> list[str]:
        return [r.style_id for r in self.references]

    @property
    def bank_hash(self) -> str:
        h = hashlib.sha256(self.source_subject.encode())
        for sid in self.style_ids:
            h.update(sid.encode())
            h.update(self.models[sid].checksum.encode() if sid in self.models else b"untrained")
        return h.hexdigest()

    def save(self, directory, extra_meta: dict | None = None) -> Path:
        directory = Path(directory)
        entries = []
        for ref in self.references:
            model_file = f"{ref.style_id}.safetensors"
            self.models[ref.style_id].save(directory / model_file, extra_meta)
            save_png(ref.image, directory / "references" / f"{ref.style_id}.png")
            entries.append({"style_id": ref.style_id, "attack_type": ref.attack_type, "source": ref.source,
                            "model": model_file, "reference": f"references/{ref.style_id}.png"})
        meta = {"source_subject": self.source_subject, "styles": entries, "bank_hash": self.bank_hash}
        meta.update(extra_meta or {})
        write_json(directory / "bank.json", meta)
        return directory

    @classmethod
    def load(cls, directory) -> "StyleBank":
        directory = Path(directory)
        meta = read_json(directory / "bank.json")
        refs, models = [], {}
        for e in meta["styles"]:
            refs.append(StyleReference(e["style_id"], load_image(directory / e["reference"]), e["attack_type"],
                                       e.get("source", "")))
            models[e["style_id"]] = StyleModel.load(directory / e["model"])
        return cls(meta["source_subject"], refs, models)


def _spoof_styles(records: Sequence[SampleRecord]) -> dict[str, list[SampleRecord]]:
    styles: dict[str, list[SampleRecord]] = {}
    for r in records:
        if r.label == "spoof":
            styles.setdefault(style_id_of(r), []).append(r)
    return styles


def select_references(manifest: DatasetManifest, subject: str = "random", seed: int = 0) -> tuple[str, list[StyleReference]]:
    """Pick the bank subject and one reference frame per spoof style.

    The reference is the first frame of the lexicographically first video of
    each style. ``subject="random"`` draws (seeded) among subjects that cover
    every style present in the dataset.
    """
    all_styles = set(_spoof_styles(manifest.records))
    if not all_styles:
        raise ContractError("manifest contains no spoof frames to use as style references")
    if subject == "random":
        complete = [s for s in manifest.subjects
                    if set(_spoof_styles(manifest.select(subject=s))) == all_styles]
        if not complete:
            raise MissingStylesError("(any)", all_styles)
        subject = random.Random(f"{seed}/bank-subject").choice(complete)
    per_style = _spoof_styles(manifest.select(subject=subject))
    missing = all_styles - set(per_style)
    if missing:
        raise MissingStylesError(subject, missing)
    refs = []
    for sid in sorted(per_style):
        first = min(per_style[sid], key=lambda r: (r.video_id, r.frame_index))
        refs.append(StyleReference(sid, load_image(manifest.abspath(first)), first.attack_type, first.path))
    return subject, refs


def build_style_bank(manifest: DatasetManifest, extractor: FeatureExtractor, subject: str = "random", seed: int = 0,
                     weights: LossWeights = LossWeights(), config: StyleTrainConfig = StyleTrainConfig(),
                     corpus: Sequence | None = None, train: bool = True) -> StyleBank:
    """Select references and train one style model each.

    The default corpus is every live train frame across subjects.
    """
    subject, refs = select_references(manifest, subject, seed)
    bank = StyleBank(subject, refs)
    if not train:
        return bank
    if corpus is None:
        corpus = [load_image(manifest.abspath(r)) for r in manifest.select(label="live", split="train")]
    for ref in refs:
        log.info("training style model %s", ref.style_id)
        bank.models[ref.style_id] = train_style_model(ref, corpus, extractor, weights, config)
    return bank


@dataclass
class SyntheticItem:
    source: str  # manifest path of the live source frame
    style_id: str
    attack_type: str
    path: str  # relative to the synthetic root


@dataclass
class SyntheticSpoofSet:
    subject_id: str
    root: str
    items: list[SyntheticItem]
    provenance: dict

    def paths(self) -> list[Path]:
        return [Path(self.root) / it.path for it in self.items]

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "items": [vars(it) for it in self.items],
            "provenance": self.provenance,
        }

    @classmethod
    def load(cls, root, subject: str) -> "SyntheticSpoofSet":
        obj = read_json(Path(root) / subject / "synthetic" / "provenance.json")
        return cls(obj["subject_id"], str(root), [SyntheticItem(**it) for it in obj["items"]], obj["provenance"])


def synthetic_relpath(subject: str, style_id: str, source: SampleRecord) -> str:
    return f"{subject}/synthetic/{style_id}/{source.video_id}_{source.frame_index:05d}.png"


def generate_spoofs(subject: str, bank: StyleBank, manifest: DatasetManifest, fraction: float = 0.1,
                    seed: int = 0, out_root=None, extra_provenance: dict | None = None) -> SyntheticSpoofSet:
    """Stylise a sampled fraction of the subject's live train frames with every bank model.

    Outputs go to ``<out_root>/<subject>/synthetic/<style_id>/<video>_<frame>.png``
    plus ``provenance.json``. On any failure nothing of this call remains on disk.
    """
    out_root = Path(out_root if out_root is not None else manifest.root)
    missing = [s for s in bank.style_ids if s not in bank.models]
    if missing:
        raise ContractError(f"style bank has untrained styles: {missing}")
    live_train = manifest.select(subject=subject, label="live", split="train")
    if not live_train:
        raise ContractError(f"subject {subject!r} has no live train records")
    sub = DatasetManifest(manifest.select(subject=subject), manifest.root, manifest.seed)
    sources = sample_style_sources(sub, fraction, seed)
    n_styles = len(bank.style_ids)
    if len(sources) * n_styles != len(live_train):
        log.warning(
            "subject %s: %d synthetic spoofs vs %d live train frames (imbalanced); fraction=1/%d would balance",
            subject, len(sources) * n_styles, len(live_train), n_styles,
        )
    final_dir = out_root / subject / "synthetic"
    out_root.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".synthetic-{subject}-", dir=out_root))
    items: list[SyntheticItem] = []
    try:
        for src in sources:
            assert src.split == "train" and src.label == "live"
            image = load_image(manifest.abspath(src))
            for sid in bank.style_ids:
                rel = synthetic_relpath(subject, sid, src)
                save_png(stylize(bank.models[sid], image), staging / Path(rel).relative_to(f"{subject}/synthetic"))
                items.append(SyntheticItem(src.path, sid, bank.models[sid].attack_type, rel))
        provenance = {"bank_hash": bank.bank_hash, "bank_subject": bank.source_subject, "sample_seed": seed,
                      "fraction": fraction, "n_live_train": len(live_train)}
        provenance.update(extra_provenance or {})
        result = SyntheticSpoofSet(subject, str(out_root), items, provenance)
        write_json(staging / "provenance.json", result.to_json())
        if final_dir.exists():
            shutil.rmtree(final_dir)
        final_dir.parent.mkdir(parents=True, exist_ok=True)
        staging.rename(final_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return result


def load_bank_dir(directory) -> StyleBank:
    """A saved bank, or a plain directory of ``style-train`` outputs (one model per file)."""
    directory = Path(directory)
    if (directory / "bank.json").exists():
        return StyleBank.load(directory)
    models = {}
    for f in sorted(directory.glob("*.safetensors")):
        m = StyleModel.load(f)
        models[m.style_id] = m
    if not models:
        raise ContractError(f"{directory}: no style models found")
    refs = [StyleReference(sid, None, m.attack_type) for sid, m in models.items()]
    return StyleBank("unknown", refs, models)
