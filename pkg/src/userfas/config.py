"""Pipeline configuration: TOML file, strict keys, published defaults.

Example (every key optional)::

    [paths]
    data_root = "data/src"
    weights = "weights/vgg19.safetensors"
    output = "runs/exp1"

    [train]
    epochs = 50
"""
from __future__ import annotations

import difflib
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigurationError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class Paths(_Section):
    data_root: str = "data/src"
    weights: str = "weights/vgg19.safetensors"
    output: str = "runs/default"


class Ingest(_Section):
    size: int = Field(256, gt=0)
    margin: float = Field(0.1, ge=0, lt=1)
    stride: int = Field(1, ge=1)
    detector: str = "full-frame"


class Split(_Section):
    train_fraction: float = Field(0.7, gt=0, lt=1)
    seed: int = 0


class Style(_Section):
    iterations: int = Field(40_000, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0)
    content_weight: float = Field(1.0, ge=0)
    style_weight: float = Field(5.0, ge=0)
    tv_weight: float = Field(1e-4, ge=0)
    image_size: int = Field(256, ge=8)
    width: int = Field(32, ge=1)
    residual_blocks: int = Field(5, ge=0)
    seed: int = 0


class Synth(_Section):
    fraction: float = Field(0.10, gt=0, le=1)
    bank_subject: str = "random"
    seed: int = 0


class Train(_Section):
    backbone: Literal["spoof_modnet", "external_backbone"] = "spoof_modnet"
    lr: float = Field(1e-4, gt=0)
    batch: int = Field(8, ge=1)
    epochs: int = Field(50, ge=0)
    seed: int = 0
    optimizer: Literal["sgd", "adam"] = "sgd"
    augmentation: bool = False
    include_real_spoofs: bool = False
    # external backbone only
    descriptor: Optional[str] = None
    pretrained: Optional[str] = None
    finetune_lr: float = Field(0.01, gt=0)
    finetune_batch: int = Field(100, ge=1)
    finetune_steps: int = Field(4000, ge=0)


class Eval(_Section):
    threshold: float = Field(0.5, ge=0, le=1)


class Run(_Section):
    deterministic: bool = True
    jobs: int = Field(1, ge=1)


class PipelineConfig(_Section):
    paths: Paths = Paths()
    ingest: Ingest = Ingest()
    split: Split = Split()
    style: Style = Style()
    synth: Synth = Synth()
    train: Train = Train()
    eval: Eval = Eval()
    run: Run = Run()

    def section_hash(self, *sections: str) -> str:
        obj = {s: getattr(self, s).model_dump() for s in sections}
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(), sort_keys=True).encode()).hexdigest()


# values published for the method; deviations are flagged in the run log
PAPER_DEFAULTS = {
    "ingest.size": 256,
    "ingest.margin": 0.1,
    "ingest.stride": 1,
    "split.train_fraction": 0.7,
    "synth.fraction": 0.10,
    "train.lr": 1e-4,
    "train.batch": 8,
    "train.epochs": 50,
    "train.finetune_lr": 0.01,
    "train.finetune_batch": 100,
    "train.finetune_steps": 4000,
}


def all_keys() -> list[str]:
    return [f"{s}.{k}" for s, sec in PipelineConfig.model_fields.items() for k in sec.annotation.model_fields]


class ConfigValidationError(ConfigurationError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def _suggest(bad: str) -> str:
    keys = all_keys()
    leaf = bad.split(".")[-1]
    matches = difflib.get_close_matches(bad, keys, n=1, cutoff=0.5) or difflib.get_close_matches(
        leaf, [k.split(".")[1] for k in keys], n=1, cutoff=0.5
    )
    if not matches:
        return ""
    m = matches[0]
    full = m if "." in m else next(k for k in keys if k.endswith("." + m))
    return f' (did you mean "{full}"?)'


def parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        errors = []
        for e in exc.errors():
            loc = ".".join(str(p) for p in e["loc"])
            if e["type"] == "extra_forbidden":
                errors.append(f"unknown key '{loc}'{_suggest(loc)}")
            else:
                errors.append(f"{loc}: {e['msg']}")
        raise ConfigValidationError(errors) from None


def validate_config(path=None) -> PipelineConfig:
    """Load and validate a TOML config; an absent/empty file yields all defaults."""
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValidationError([f"{path}: {exc}"]) from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigValidationError([f"{path}: {exc}"]) from None
    return parse_config(data)


def deviations(config: PipelineConfig) -> dict[str, tuple]:
    """Keys whose value differs from the published default: key -> (value, default)."""
    out = {}
    for key, default in PAPER_DEFAULTS.items():
        section, name = key.split(".")
        value = getattr(getattr(config, section), name)
        if value != default:
            out[key] = (value, default)
    return out
