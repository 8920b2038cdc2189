import json

import pytest
from click.testing import CliRunner

from userfas.backbone import random_vgg19_state, write_weights
from userfas.cli import main
from userfas.config import parse_config
from userfas.errors import PrerequisiteError
from userfas.fixture import SIW_LIKE_STYLES, make_dataset
from userfas.pipeline import STAGES, Pipeline


def tiny_config(root, **train):
    return parse_config({
        "paths": {"data_root": str(root / "src"), "weights": str(root / "vgg.safetensors"),
                  "output": str(root / "out")},
        "ingest": {"size": 16},
        "split": {"train_fraction": 0.5},
        "style": {"iterations": 2, "batch_size": 1, "image_size": 16, "width": 4, "residual_blocks": 1},
        "synth": {"fraction": 0.5},
        "train": {"epochs": 2, "lr": 1e-3, **train},
    })


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    make_dataset(root / "src", n_subjects=2, live_videos=2, frames_per_video=2, styles=SIW_LIKE_STYLES[:2],
                 spoof_frames_per_video=2, size=16)
    write_weights(root / "vgg.safetensors", random_vgg19_state(0))
    return root


def write_toml(path, cfg):
    lines = []
    for section, values in cfg.model_dump().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is not None:
                lines.append(f"{k} = {json.dumps(v)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_full_run_then_noop(workspace):
    cfg = tiny_config(workspace)
    pipe = Pipeline(cfg)
    results = pipe.run_all()
    assert [r.status for r in results] == ["ran"] * len(STAGES)
    out = workspace / "out"
    for name in ("manifest.json", "split_manifest.json", "bank/bank.json", "scores.csv", "report.json",
                 "report.csv", "boxplot.png"):
        assert (out / name).exists(), name
    assert sorted(p.name for p in (out / "models").glob("*.safetensors")) == ["s000.safetensors", "s001.safetensors"]
    log = [json.loads(line) for line in (out / "run_log.jsonl").read_text().splitlines()]
    assert [e["stage"] for e in log] == list(STAGES)
    assert log[0]["deviations_from_published_defaults"]["ingest.size"] == [16, 256]
    report = json.loads((out / "report.json").read_text())
    assert report["notes"]["bank_subject"] in ("s000", "s001")

    again = Pipeline(cfg).run_all()
    assert [r.status for r in again] == ["up-to-date"] * len(STAGES)


def test_changed_section_reruns_downstream_only(workspace):
    Pipeline(tiny_config(workspace)).run_all()
    results = Pipeline(tiny_config(workspace, epochs=3)).run_all()
    status = {r.stage: r.status for r in results}
    assert [status[s] for s in ("ingest", "split", "style-train", "spoof-gen")] == ["up-to-date"] * 4
    assert status["train"] == "ran"


def test_missing_prerequisite(tmp_path):
    cfg = parse_config({"paths": {"output": str(tmp_path / "out")}})
    with pytest.raises(PrerequisiteError) as info:
        Pipeline(cfg).run_stage("eval")
    assert info.value.stage == "eval"


class TestCli:
    def test_validate_config_exit_codes(self, tmp_path):
        runner = CliRunner()
        good = tmp_path / "good.toml"
        good.write_text("[train]\nepochs = 5\n")
        res = runner.invoke(main, ["validate-config", str(good)])
        assert res.exit_code == 0 and '"epochs": 5' in res.output
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nbatchsz = 4\n")
        res = runner.invoke(main, ["validate-config", str(bad)])
        assert res.exit_code == 2 and "train.batch" in res.output

    def test_prerequisite_exit_code(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'[paths]\noutput = "{tmp_path / "out"}"\n')
        res = CliRunner().invoke(main, ["run", "train", "--config", str(cfg)])
        assert res.exit_code == 3 and "spoof-gen" in res.output

    def test_runtime_failure_exit_code(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'[paths]\noutput = "{tmp_path / "out"}"\ndata_root = "{tmp_path / "src"}"\n')
        (tmp_path / "src" / "a" / "live" / "v0").mkdir(parents=True)
        (tmp_path / "src" / "a" / "live" / "v0" / "0.png").write_bytes(b"garbage")
        res = CliRunner().invoke(main, ["run", "ingest", "--config", str(cfg)])
        assert res.exit_code == 4

    def test_run_all_and_noop_via_cli(self, workspace, tmp_path):
        cfg = tiny_config(workspace)
        cfg.paths.output = str(tmp_path / "cli-out")
        path = write_toml(tmp_path / "cfg.toml", cfg)
        runner = CliRunner()
        first = runner.invoke(main, ["run", "all", "--config", str(path)])
        assert first.exit_code == 0, first.output
        second = runner.invoke(main, ["run", "all", "--config", str(path)])
        assert second.exit_code == 0 and second.output.count("up-to-date") == len(STAGES)

    def test_stepwise_commands(self, workspace, tmp_path):
        runner = CliRunner()
        ok = lambda args: runner.invoke(main, args, catch_exceptions=False)
        r = ok(["ingest", "--src", str(workspace / "src"), "--out", str(tmp_path / "crops"), "--size", "16"])
        assert r.exit_code == 0, r.output
        manifest = tmp_path / "crops" / "manifest.json"
        assert manifest.exists()
        assert ok(["split", "--manifest", str(manifest), "--train-frac", "0.5"]).exit_code == 0
        r = ok(["style-bank", "--manifest", str(manifest), "--out", str(tmp_path / "bank"),
                "--weights", str(workspace / "vgg.safetensors"), "--iters", "1", "--batch", "1",
                "--image-size", "16", "--width", "4"])
        assert r.exit_code == 0, r.output
        r = ok(["spoof-gen", "--manifest", str(manifest), "--bank", str(tmp_path / "bank"), "--fraction", "0.5"])
        assert r.exit_code == 0, r.output
        r = ok(["train", "--manifest", str(manifest), "--epochs", "1", "--out", str(tmp_path / "models")])
        assert r.exit_code == 0, r.output
        r = ok(["score", "--manifest", str(manifest), "--models", str(tmp_path / "models"),
                "--out", str(tmp_path / "scores.csv")])
        assert r.exit_code == 0, r.output
        r = ok(["eval", "--scores", str(tmp_path / "scores.csv"), "--out", str(tmp_path / "report.json"),
                "--csv", str(tmp_path / "report.csv"), "--plot", str(tmp_path / "box.png")])
        assert r.exit_code == 0, r.output
        assert (tmp_path / "report.csv").read_text().startswith("subject,accuracy\n")


def test_wiped_outputs_trigger_rerun(workspace):
    cfg = tiny_config(workspace)
    Pipeline(cfg).run_all()
    # re-running ingest rebuilds crops/, which removes the synthetic spoofs
    Pipeline(cfg).run_stage("ingest", force=True)
    status = {r.stage: r.status for r in Pipeline(cfg).run_all()}
    assert status["spoof-gen"] == "ran"
    assert status["split"] == "up-to-date" and status["style-train"] == "up-to-date"
    assert status["train"] == "up-to-date"  # identical synthetic data, models still on disk
    assert (workspace / "out" / "crops" / "s000" / "synthetic" / "provenance.json").exists()
