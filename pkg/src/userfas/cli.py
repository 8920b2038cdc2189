"""Command-line entry point: ``userfas <command>``.

Exit codes: 0 success, 2 validation/configuration error, 3 missing
prerequisite stage, 4 runtime failure.
"""
from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from .errors import ConfigurationError, ContractError, PrerequisiteError, UserFASError

EXIT_OK, EXIT_VALIDATION, EXIT_PREREQ, EXIT_RUNTIME = 0, 2, 3, 4


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PrerequisiteError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_PREREQ)
        except (ConfigurationError, ContractError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (UserFASError, OSError, RuntimeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Per-user face anti-spoofing pipeline."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# --- pipeline ---------------------------------------------------------------


@main.command("run")
@click.argument("stage", type=click.Choice(["ingest", "split", "style-train", "spoof-gen", "train", "eval",
                                             "report", "all"]))
@click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None)
@click.option("--force", is_flag=True, help="Re-run even if up-to-date.")
@click.option("--jobs", type=int, default=None, help="Worker cap (overrides run.jobs).")
@_handle_errors
def run_cmd(stage, config_file, force, jobs):
    """Run one pipeline stage (or all) from a TOML config."""
    from .config import validate_config
    from .pipeline import run_stage

    config = validate_config(config_file)
    if jobs is not None:
        config.run.jobs = jobs
    for res in run_stage(stage, config, force):
        if res.status == "up-to-date":
            click.echo(f"{res.stage}: up-to-date")
        else:
            click.echo(f"{res.stage}: done in {res.seconds:.1f}s")


@main.command("validate-config")
@click.argument("config_file", type=click.Path(dir_okay=False))
@_handle_errors
def validate_cmd(config_file):
    """Check a config file and print the effective configuration."""
    import json

    from .config import deviations, validate_config

    config = validate_config(config_file)
    click.echo(json.dumps(config.model_dump(), indent=2, sort_keys=True))
    for key, (value, default) in deviations(config).items():
        click.echo(f"note: {key} = {value} (published default {default})", err=True)


# --- dataset ----------------------------------------------------------------


@main.command()
@click.option("--src", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--size", default=256, show_default=True)
@click.option("--margin", default=0.1, show_default=True)
@click.option("--stride", default=1, show_default=True)
@click.option("--detector", default="full-frame", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--jobs", default=1, show_default=True)
@_handle_errors
def ingest(src, out, size, margin, stride, detector, seed, jobs):
    """Harvest face crops from SRC videos into OUT and write OUT/manifest.json."""
    from .ingest import CropSpec, build_manifest, ingest_tree

    stats = ingest_tree(src, out, CropSpec(size, margin, detector), stride, jobs)
    manifest = build_manifest(out, seed)
    path = manifest.save(Path(out) / "manifest.json")
    click.echo(f"{stats.cropped} crops ({stats.skipped} frames without a face); manifest: {path}")


@main.command()
@click.option("--manifest", "manifest_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--train-frac", default=0.7, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Defaults to rewriting --manifest.")
@_handle_errors
def split(manifest_file, train_frac, seed, out):
    """Assign videos to train/test per subject and label."""
    from .ingest import DatasetManifest, split_holdout

    manifest = split_holdout(DatasetManifest.load(manifest_file), train_frac, seed)
    manifest.save(out or manifest_file)
    for w in manifest.warnings:
        click.echo(f"warning: {w}", err=True)
    n_train = sum(r.split == "train" for r in manifest.records)
    click.echo(f"{n_train} train / {len(manifest.records) - n_train} test records")


# --- backbone ---------------------------------------------------------------


@main.command("backbone-init")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@_handle_errors
def backbone_init(out, seed):
    """Write a deterministic randomly initialised VGG19 trunk (for hermetic runs)."""
    from .backbone import random_vgg19_state, write_weights

    write_weights(out, random_vgg19_state(seed), source_uri=f"random:he-normal:seed={seed}")
    click.echo(out)


@main.command("backbone-import")
@click.option("--torchvision", "tv_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="torchvision vgg19 state dict (.pth)")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def backbone_import(tv_path, out):
    """Convert torchvision VGG19 weights into the trunk weights format."""
    import torch

    from .backbone import from_torchvision_state, write_weights

    sd = torch.load(tv_path, map_location="cpu", weights_only=True)
    write_weights(out, from_torchvision_state(sd), source_uri=Path(tv_path).name)
    click.echo(out)


# --- style ------------------------------------------------------------------


def _style_options(fn):
    for opt in reversed([
        click.option("--weights", "weights_file", required=True, type=click.Path(exists=True, dir_okay=False),
                     help="VGG19 trunk weights (.safetensors)"),
        click.option("--iters", default=40_000, show_default=True),
        click.option("--batch", default=4, show_default=True),
        click.option("--lr", default=1e-3, show_default=True),
        click.option("--seed", default=0, show_default=True),
        click.option("--image-size", default=256, show_default=True),
        click.option("--width", default=32, show_default=True),
        click.option("--content-weight", default=1.0, show_default=True),
        click.option("--style-weight", default=5.0, show_default=True),
        click.option("--tv-weight", default=1e-4, show_default=True),
    ]):
        fn = opt(fn)
    return fn


def _style_config(iters, batch, lr, seed, image_size, width, content_weight, style_weight, tv_weight):
    from .style import LossWeights, StyleTrainConfig

    return (LossWeights(content_weight, style_weight, tv_weight),
            StyleTrainConfig(iters, batch, lr, seed, image_size, width))


@main.command("style-train")
@click.option("--ref", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--style-id", required=True)
@click.option("--attack-type", default="print", show_default=True)
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Manifest; live train records form the corpus.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_style_options
@_handle_errors
def style_train(ref, style_id, attack_type, corpus, out, weights_file, **kw):
    """Train one style model from a single reference image."""
    from .backbone import load_backbone
    from .images import load_image
    from .ingest import DatasetManifest
    from .style import StyleReference, train_style_model

    manifest = DatasetManifest.load(corpus)
    records = manifest.select(label="live", split="train") or manifest.select(label="live")
    images = [load_image(manifest.abspath(r)) for r in records]
    weights, config = _style_config(**kw)
    model = train_style_model(StyleReference(style_id, load_image(ref), attack_type, str(ref)), images,
                              load_backbone(weights_file), weights, config)
    path = model.save(Path(out) / f"{style_id}.safetensors")
    click.echo(f"{path} (final loss {model.loss_trace[-1] if model.loss_trace else float('nan'):.6g})")


@main.command("style-bank")
@click.option("--manifest", "manifest_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--subject", default="random", show_default=True)
@click.option("--bank-seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_style_options
@_handle_errors
def style_bank(manifest_file, subject, bank_seed, out, weights_file, **kw):
    """Select one reference per spoof style of a subject and train the whole bank."""
    from .backbone import load_backbone
    from .ingest import DatasetManifest
    from .synthesis import build_style_bank

    weights, config = _style_config(**kw)
    bank = build_style_bank(DatasetManifest.load(manifest_file), load_backbone(weights_file), subject, bank_seed,
                            weights, config)
    bank.save(out)
    click.echo(f"bank of {len(bank.style_ids)} styles from subject {bank.source_subject}: {out}")


@main.command()
@click.option("--model", "model_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_handle_errors
def stylize(model_file, in_dir, out_dir):
    """Stylise every image in a directory."""
    from .images import load_image, save_png
    from .ingest import IMAGE_SUFFIXES
    from .style import StyleModel, stylize as run

    model = StyleModel.load(model_file)
    n = 0
    for p in sorted(Path(in_dir).iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            save_png(run(model, load_image(p)), Path(out_dir) / f"{p.stem}.png")
            n += 1
    click.echo(f"stylised {n} image(s) into {out_dir}")


@main.command("spoof-gen")
@click.option("--manifest", "manifest_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bank", "bank_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--subject", default="all", show_default=True)
@click.option("--fraction", default=0.10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False), help="Defaults to the manifest root.")
@_handle_errors
def spoof_gen(manifest_file, bank_dir, subject, fraction, seed, out):
    """Generate synthetic spoofs for one subject or all."""
    from .ingest import DatasetManifest
    from .synthesis import generate_spoofs, load_bank_dir

    manifest = DatasetManifest.load(manifest_file)
    bank = load_bank_dir(bank_dir)
    subjects = manifest.subjects if subject == "all" else [subject]
    for s in subjects:
        syn = generate_spoofs(s, bank, manifest, fraction, seed, out)
        click.echo(f"{s}: {len(syn.items)} synthetic spoofs")


# --- classifier -------------------------------------------------------------


@main.command()
@click.option("--manifest", "manifest_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--synthetic", "synthetic_root", default=None, type=click.Path(file_okay=False),
              help="Root holding <subject>/synthetic/ (defaults to the manifest root).")
@click.option("--subject", default="all", show_default=True)
@click.option("--backbone", type=click.Choice(["spoof_modnet", "external_backbone"]), default="spoof_modnet",
              show_default=True)
@click.option("--lr", default=None, type=float, help="Default 1e-4 (spoof_modnet) / 0.01 (external).")
@click.option("--batch", default=None, type=int, help="Default 8 (spoof_modnet) / 100 (external).")
@click.option("--epochs", default=50, show_default=True)
@click.option("--steps", default=4000, show_default=True, help="External backbone fine-tuning steps.")
@click.option("--seed", default=0, show_default=True)
@click.option("--descriptor", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--pretrained", default=None, type=click.Path(dir_okay=False))
@click.option("--include-real-spoofs", is_flag=True, help="Ablation: add real spoof train frames.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_handle_errors
def train(manifest_file, synthetic_root, subject, backbone, lr, batch, epochs, steps, seed, descriptor,
          pretrained, include_real_spoofs, out):
    """Train one classifier per subject."""
    from .classifier import BackboneDescriptor, FinetuneConfig, TrainConfig, attach_external_backbone, train_subject_model
    from .ingest import DatasetManifest
    from .synthesis import SyntheticSpoofSet
    from .tensorio import read_json

    manifest = DatasetManifest.load(manifest_file)
    syn_root = synthetic_root or manifest.root
    subjects = manifest.subjects if subject == "all" else [subject]
    config = TrainConfig(lr or 1e-4, batch or 8, epochs, seed)
    for s in subjects:
        kwargs = {}
        if backbone == "external_backbone":
            if not descriptor:
                raise ConfigurationError("--descriptor is required with --backbone external_backbone")
            ext = attach_external_backbone(BackboneDescriptor(**read_json(descriptor)), pretrained, seed, s)
            kwargs = {"external": ext, "finetune": FinetuneConfig(lr or 0.01, batch or 100, steps, seed)}
        syn = SyntheticSpoofSet.load(syn_root, s)
        real = manifest.select(subject=s, label="spoof", split="train") if include_real_spoofs else ()
        model = train_subject_model(s, manifest.select(subject=s, label="live", split="train"), syn, config,
                                    root=manifest.root, real_spoofs=real, backbone=backbone, **kwargs)
        path = model.save(Path(out) / f"{s}.safetensors")
        click.echo(f"{s}: {path}")


@main.command()
@click.option("--manifest", "manifest_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def score(manifest_file, models_dir, threshold, out):
    """Score each subject's test frames with its own model; writes the score CSV."""
    from .ingest import DatasetManifest
    from .metrics import write_scores
    from .pipeline import score_subjects

    records = score_subjects(DatasetManifest.load(manifest_file), models_dir, threshold)
    write_scores(records, out)
    click.echo(f"{len(records)} scores -> {out}")


@main.command("eval")
@click.option("--scores", "scores_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--plot", default=None, type=click.Path(dir_okay=False))
@click.option("--csv", "csv_out", default=None, type=click.Path(dir_okay=False), help="Per-subject accuracy table.")
@_handle_errors
def eval_cmd(scores_file, threshold, out, plot, csv_out):
    """Compute APCER/NPCER/ACER, FAR/FRR, F1, accuracy and per-subject boxplot stats."""
    from .metrics import emit_report, evaluate, read_scores

    report = evaluate(read_scores(scores_file), threshold)
    emit_report(report, out, "json", plot=plot)
    if csv_out:
        emit_report(report, csv_out, "csv")
    fmt = lambda v: "undefined" if v is None else f"{v:.4f}"
    click.echo(f"APCER {fmt(report.apcer)}  NPCER {fmt(report.npcer)}  ACER {fmt(report.acer)}  "
               f"accuracy {fmt(report.accuracy)}  F1 {fmt(report.f1)}")


@main.command("make-fixture")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--subjects", default=4, show_default=True)
@click.option("--size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--video", is_flag=True, help="Write .avi files instead of frame directories.")
@_handle_errors
def make_fixture(out, subjects, size, seed, video):
    """Write the synthetic 10-style source dataset used by the smoke tests."""
    from .fixture import make_dataset

    make_dataset(out, n_subjects=subjects, size=size, seed=seed, as_video=video)
    click.echo(out)


if __name__ == "__main__":
    main()
