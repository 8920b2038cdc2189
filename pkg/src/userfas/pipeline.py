"""Stage runner with content-hash dependency tracking.

Artifacts under ``paths.output``::

    crops/                      face crops (+ <subject>/synthetic/ after spoof-gen)
    manifest.json               ingest
    split_manifest.json         split
    bank/                       style-train
    models/<subject>.safetensors
    scores.csv, report.json     eval
    report.csv, boxplot.png     report
    stages/<stage>.json         completion stamps
    run_log.jsonl               one line per executed stage
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import determinism
from .config import PipelineConfig, deviations
from .errors import ConfigurationError, PrerequisiteError
from .tensorio import read_json, write_json

log = logging.getLogger(__name__)

STAGES = ("ingest", "split", "style-train", "spoof-gen", "train", "eval", "report")
PREREQS = {
    "ingest": (),
    "split": ("ingest",),
    "style-train": ("split",),
    "spoof-gen": ("style-train",),
    "train": ("spoof-gen",),
    "eval": ("train",),
    "report": ("eval",),
}
SECTIONS = {
    "ingest": ("paths", "ingest"),
    "split": ("split",),
    "style-train": ("style", "synth"),
    "spoof-gen": ("synth",),
    "train": ("train",),
    "eval": ("eval",),
    "report": (),
}


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" | "up-to-date"
    key: str
    seconds: float = 0.0


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.paths.output)
        determinism.configure(config.run.deterministic)

    # --- paths ---
    @property
    def crops(self) -> Path:
        return self.out / "crops"

    def stamp_path(self, stage: str) -> Path:
        return self.out / "stages" / f"{stage}.json"

    # --- dependency keys ---
    def _extra_key(self, stage: str) -> str:
        if stage == "style-train":
            from .images import file_sha256

            w = Path(self.config.paths.weights)
            return file_sha256(w) if w.exists() else "missing"
        if stage == "ingest":
            return str(Path(self.config.paths.data_root).resolve())
        return ""

    def stage_key(self, stage: str) -> str:
        h = hashlib.sha256(stage.encode())
        h.update(self.config.section_hash(*SECTIONS[stage]).encode())
        h.update(self._extra_key(stage).encode())
        for dep in PREREQS[stage]:
            stamp = self.stamp_path(dep)
            if not stamp.exists():
                raise PrerequisiteError(stage, dep)
            h.update(read_json(stamp)["output_hash"].encode())
        return h.hexdigest()

    def up_to_date(self, stage: str) -> bool:
        """Same key as the last run and every recorded output still on disk, unchanged.

        The output check matters because stages share directories: re-running
        ingest wipes ``crops/``, including the synthetic spoofs spoof-gen put there.
        """
        stamp_file = self.stamp_path(stage)
        if not stamp_file.exists():
            return False
        stamp = read_json(stamp_file)
        if stamp["key"] != self.stage_key(stage):
            return False
        outputs = [self.out / rel for rel in stamp.get("outputs", [])]
        if not all(p.exists() for p in outputs):
            return False
        return _hash_files(outputs) == stamp.get("outputs_hash")

    # --- execution ---
    def run_stage(self, stage: str, force: bool = False) -> StageResult:
        if stage not in STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}; choose from {STAGES + ('all',)}")
        key = self.stage_key(stage)
        if not force and self.up_to_date(stage):
            log.info("%s: up-to-date", stage)
            return StageResult(stage, "up-to-date", key)
        start = time.time()
        output_hash, outputs = _STAGE_FUNCS[stage](self)
        seconds = time.time() - start
        write_json(self.stamp_path(stage), {
            "stage": stage, "key": key, "output_hash": output_hash, "config_hash": self.config.config_hash,
            "outputs": sorted(str(Path(o).relative_to(self.out)) for o in outputs),
            "outputs_hash": _hash_files(outputs),
        })
        self._log(stage, seconds)
        return StageResult(stage, "ran", key, seconds)

    def run_all(self, force: bool = False) -> list[StageResult]:
        return [self.run_stage(s, force) for s in STAGES]

    def _log(self, stage: str, seconds: float):
        c = self.config
        entry = {
            "stage": stage,
            "config_hash": c.config_hash,
            "seeds": {"split": c.split.seed, "style": c.style.seed, "synth": c.synth.seed, "train": c.train.seed},
            "wall_seconds": round(seconds, 3),
            "deviations_from_published_defaults": {k: list(v) for k, v in deviations(c).items()},
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "run_log.jsonl", "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def meta(self) -> dict:
        return {"config_hash": self.config.config_hash}


def _hash_files(paths) -> str:
    from .images import file_sha256

    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(str(p.name).encode())
        h.update(file_sha256(p).encode())
    return h.hexdigest()


# --- stage bodies; each returns (digest of what it produced, files written) --


def _ingest(p: Pipeline) -> str:
    import shutil

    from .ingest import CropSpec, build_manifest, ingest_tree

    c = p.config
    src = Path(c.paths.data_root)
    if not src.is_dir():
        raise ConfigurationError(f"paths.data_root does not exist: {src}")
    if p.crops.exists():
        shutil.rmtree(p.crops)
    stats = ingest_tree(src, p.crops, CropSpec(c.ingest.size, c.ingest.margin, c.ingest.detector),
                        c.ingest.stride, c.run.jobs)
    log.info("ingest: %d crops, %d frames skipped", stats.cropped, stats.skipped)
    manifest = build_manifest(p.crops, c.split.seed)
    path = manifest.save(p.out / "manifest.json")
    return _hash_files([path]), [path]


def _split(p: Pipeline) -> str:
    from .ingest import DatasetManifest, split_holdout

    c = p.config
    manifest = split_holdout(DatasetManifest.load(p.out / "manifest.json"), c.split.train_fraction, c.split.seed)
    path = manifest.save(p.out / "split_manifest.json")
    return _hash_files([path]), [path]


def _style_train(p: Pipeline) -> str:
    import shutil

    from .backbone import load_backbone
    from .ingest import DatasetManifest
    from .style import LossWeights, StyleTrainConfig
    from .synthesis import build_style_bank

    c = p.config
    extractor = load_backbone(c.paths.weights)
    manifest = DatasetManifest.load(p.out / "split_manifest.json")
    s = c.style
    bank = build_style_bank(
        manifest, extractor, c.synth.bank_subject, c.synth.seed,
        LossWeights(s.content_weight, s.style_weight, s.tv_weight),
        StyleTrainConfig(s.iterations, s.batch_size, s.lr, s.seed, s.image_size, s.width, s.residual_blocks),
    )
    bank_dir = p.out / "bank"
    if bank_dir.exists():
        shutil.rmtree(bank_dir)
    bank.save(bank_dir, {**p.meta(), "backbone_checksum": extractor.checksum})
    return bank.bank_hash, sorted(f for f in bank_dir.rglob("*") if f.is_file())


def _spoof_gen(p: Pipeline) -> str:
    from .ingest import DatasetManifest
    from .synthesis import StyleBank, generate_spoofs

    c = p.config
    manifest = DatasetManifest.load(p.out / "split_manifest.json")
    bank = StyleBank.load(p.out / "bank")
    h = hashlib.sha256()
    summary, written = {}, []
    for subject in manifest.subjects:
        if not manifest.select(subject=subject, label="live", split="train"):
            log.warning("subject %s has no live train frames; no synthetic spoofs", subject)
            continue
        syn = generate_spoofs(subject, bank, manifest, c.synth.fraction, c.synth.seed, p.crops, p.meta())
        summary[subject] = len(syn.items)
        h.update(_hash_files(syn.paths()).encode())
        written += syn.paths() + [p.crops / subject / "synthetic" / "provenance.json"]
    written.append(write_json(p.out / "synthetic.json",
                              {"counts": summary, "bank_subject": bank.source_subject, **p.meta()}))
    return h.hexdigest(), written


def _train(p: Pipeline) -> str:
    from .classifier import TrainConfig, train_subject_model
    from .ingest import DatasetManifest
    from .synthesis import SyntheticSpoofSet

    c = p.config
    t = c.train
    manifest = DatasetManifest.load(p.out / "split_manifest.json")
    cfg = TrainConfig(t.lr, t.batch, t.epochs, t.seed, optimizer=t.optimizer, augmentation=t.augmentation)
    models_dir = p.out / "models"
    written = []
    for subject in manifest.subjects:
        synthetic_file = p.crops / subject / "synthetic" / "provenance.json"
        if not synthetic_file.exists():
            continue
        syn = SyntheticSpoofSet.load(p.crops, subject)
        real = manifest.select(subject=subject, label="spoof", split="train") if t.include_real_spoofs else ()
        kwargs = {}
        if t.backbone == "external_backbone":
            kwargs = _external_kwargs(c, subject)
        model = train_subject_model(subject, manifest.select(subject=subject, label="live", split="train"), syn,
                                    cfg, root=manifest.root, real_spoofs=real, backbone=t.backbone, **kwargs)
        written.append(model.save(models_dir / f"{subject}.safetensors", p.meta()))
    if not written:
        raise ConfigurationError("no subject had synthetic spoofs to train on")
    return _hash_files(written), written


def _external_kwargs(c: PipelineConfig, subject: str) -> dict:
    from .classifier import BackboneDescriptor, FinetuneConfig, attach_external_backbone

    t = c.train
    if not t.descriptor:
        raise ConfigurationError("train.descriptor is required for the external backbone")
    descriptor = BackboneDescriptor(**read_json(t.descriptor))
    external = attach_external_backbone(descriptor, t.pretrained, t.seed, subject)
    return {"external": external,
            "finetune": FinetuneConfig(t.finetune_lr, t.finetune_batch, t.finetune_steps, t.seed)}


def score_subjects(manifest, models_dir, threshold: float = 0.5) -> list:
    """Score every test record of each subject with that subject's model."""
    from .classifier import ClassifierModel, predict_proba
    from .images import load_image
    from .metrics import ScoreRecord, decide

    records = []
    for subject in manifest.subjects:
        path = Path(models_dir) / f"{subject}.safetensors"
        if not path.exists():
            continue
        model = ClassifierModel.load(path)
        test = manifest.select(subject=subject, split="test")
        if not test:
            continue
        probs = predict_proba(model, [load_image(manifest.abspath(r)) for r in test])
        for r, pr in zip(test, probs):
            p_spoof = round(float(pr[1]), 6)
            records.append(ScoreRecord(subject, r.video_id, r.frame_index, r.label, p_spoof, decide(p_spoof, threshold)))
    return records


def _eval(p: Pipeline) -> str:
    from .ingest import DatasetManifest
    from .metrics import emit_report, evaluate, write_scores

    c = p.config
    manifest = DatasetManifest.load(p.out / "split_manifest.json")
    records = score_subjects(manifest, p.out / "models", c.eval.threshold)
    if not records:
        raise ConfigurationError("no test records could be scored")
    scores = write_scores(records, p.out / "scores.csv")
    report = evaluate(records, c.eval.threshold)
    bank_subject = read_json(p.out / "bank" / "bank.json")["source_subject"]
    report.notes = {"config_hash": c.config_hash, "bank_subject": bank_subject,
                    "bank_subject_note": "style references were taken from this subject"}
    emit_report(report, p.out / "report.json", "json")
    files = [scores, p.out / "report.json"]
    return _hash_files(files), files


def _report(p: Pipeline) -> str:
    from .metrics import emit_report, load_report

    report = load_report(p.out / "report.json")
    files = emit_report(report, p.out / "report.csv", "csv", plot=p.out / "boxplot.png")
    return _hash_files(files[:1]), files


_STAGE_FUNCS: dict[str, Callable[[Pipeline], tuple[str, list[Path]]]] = {
    "ingest": _ingest,
    "split": _split,
    "style-train": _style_train,
    "spoof-gen": _spoof_gen,
    "train": _train,
    "eval": _eval,
    "report": _report,
}


def run_stage(stage: str, config: PipelineConfig, force: bool = False) -> list[StageResult]:
    pipe = Pipeline(config)
    if stage == "all":
        return pipe.run_all(force)
    return [pipe.run_stage(stage, force)]
