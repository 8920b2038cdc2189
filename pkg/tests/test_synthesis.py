import logging

import numpy as np
import pytest

import userfas.synthesis as synthesis
from userfas.errors import ContractError
from userfas.fixture import SIW_LIKE_STYLES, make_dataset
from userfas.ingest import CropSpec, DatasetManifest, build_manifest, ingest_tree, split_holdout
from userfas.style import LossWeights, StyleTrainConfig
from userfas.synthesis import (
    MissingStylesError,
    StyleBank,
    SyntheticSpoofSet,
    build_style_bank,
    generate_spoofs,
    load_bank_dir,
    select_references,
)

TINY = StyleTrainConfig(iterations=2, batch_size=1, image_size=16, width=4, residual_blocks=1)
STYLES = SIW_LIKE_STYLES[:3]


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    make_dataset(root / "src", n_subjects=2, live_videos=4, frames_per_video=5, styles=STYLES,
                 spoof_frames_per_video=2, size=16)
    ingest_tree(root / "src", root / "crops", CropSpec(16, 0.1))
    return split_holdout(build_manifest(root / "crops"), 0.5, seed=0)


@pytest.fixture(scope="module")
def bank(manifest, extractor):
    return build_style_bank(manifest, extractor, "random", 0, LossWeights(), TINY,
                            corpus=[np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)])


def test_references_cover_every_style(manifest):
    subject, refs = select_references(manifest, "random", seed=4)
    assert subject in manifest.subjects
    assert [r.style_id for r in refs] == sorted(s.style_id for s in STYLES)
    assert select_references(manifest, "random", seed=4)[0] == subject
    for r in refs:
        assert r.source.startswith(f"{subject}/spoof/") and r.source.endswith("00000.png")


def test_missing_style_reported(manifest):
    partial = DatasetManifest([r for r in manifest.records
                               if not (r.subject_id == "s000" and r.attack_type == "phone")], manifest.root, 0)
    with pytest.raises(MissingStylesError) as info:
        select_references(partial, "s000")
    assert info.value.missing == ["phone-m1"]


def test_balanced_generation_and_provenance(tmp_path, manifest, bank):
    out = tmp_path / "out"
    live_train = manifest.select(subject="s001", label="live", split="train")
    syn = generate_spoofs("s001", bank, manifest, fraction=1 / 3, seed=0, out_root=out)
    n_sources = len({it.source for it in syn.items})
    assert len(syn.items) == n_sources * 3
    train_paths = {r.path for r in live_train}
    assert all(it.source in train_paths for it in syn.items)
    assert all(p.exists() for p in syn.paths())
    assert {it.style_id for it in syn.items} == set(bank.style_ids)
    loaded = SyntheticSpoofSet.load(out, "s001")
    assert loaded.items == syn.items and loaded.provenance["bank_hash"] == bank.bank_hash
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def test_generation_is_deterministic(tmp_path, manifest, bank):
    a = generate_spoofs("s000", bank, manifest, 0.5, 7, tmp_path / "a")
    b = generate_spoofs("s000", bank, manifest, 0.5, 7, tmp_path / "b")
    assert [it.path for it in a.items] == [it.path for it in b.items]
    assert all((tmp_path / "a" / it.path).read_bytes() == (tmp_path / "b" / it.path).read_bytes()
               for it in a.items)


def test_imbalance_warning(tmp_path, manifest, bank, caplog):
    with caplog.at_level(logging.WARNING, logger="userfas.synthesis"):
        generate_spoofs("s000", bank, manifest, 1.0, 0, tmp_path)
    assert "imbalanced" in caplog.text


def test_failure_leaves_nothing_behind(tmp_path, manifest, bank, monkeypatch):
    calls = {"n": 0}
    real = synthesis.stylize

    def flaky(model, x):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("disk full")
        return real(model, x)

    monkeypatch.setattr(synthesis, "stylize", flaky)
    with pytest.raises(RuntimeError):
        generate_spoofs("s000", bank, manifest, 1.0, 0, tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_untrained_bank_rejected(tmp_path, manifest):
    subject, refs = select_references(manifest)
    with pytest.raises(ContractError):
        generate_spoofs("s000", StyleBank(subject, refs), manifest, 0.5, 0, tmp_path)


def test_bank_roundtrip(tmp_path, bank):
    bank.save(tmp_path / "bank", {"config_hash": "abc"})
    loaded = StyleBank.load(tmp_path / "bank")
    assert loaded.bank_hash == bank.bank_hash and loaded.style_ids == bank.style_ids
    plain = tmp_path / "plain"
    for sid, m in bank.models.items():
        m.save(plain / f"{sid}.safetensors")
    assert load_bank_dir(plain).style_ids == bank.style_ids


def test_five_styles_on_two_hundred_frames(tmp_path, bank, caplog):
    from userfas.images import save_png
    from userfas.ingest import SampleRecord

    rng = np.random.default_rng(0)
    records = []
    for i in range(200):
        rel = f"u/live/v{i // 10:02d}/{i % 10:05d}.png"
        save_png(rng.random((8, 8, 3)), tmp_path / "crops" / rel)
        records.append(SampleRecord("u", f"v{i // 10:02d}", i % 10, "live", "none", "train", rel))
    manifest = DatasetManifest(records, str(tmp_path / "crops"), 0)
    model = next(iter(bank.models.values()))
    from userfas.style import StyleReference

    ids = [f"print-m{i}" for i in range(5)]
    five = StyleBank("x", [StyleReference(s, None) for s in ids], {s: model for s in ids})
    with caplog.at_level(logging.WARNING, logger="userfas.synthesis"):
        syn = generate_spoofs("u", five, manifest, 0.10, 0, tmp_path / "crops")
    assert len(syn.items) == 100
    assert "imbalanced" in caplog.text
