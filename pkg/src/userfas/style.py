"""Feed-forward style transfer with perceptual losses and instance normalisation.

One :class:`StyleModel` is trained per spoof reference image. ``optimize_direct``
runs pixel-space optimisation of the same objective and serves as an oracle
for the trained networks.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeatureExtractor, gram
from .determinism import deterministic_mode
from .errors import ContractError, TrainingDivergedError
from .images import as_image, from_tensor, hash_images, resize_bilinear, to_tensor
from .tensorio import load_archive, save_archive, tensors_checksum

log = logging.getLogger(__name__)

CONTENT_LAYER = "relu3_3"
STYLE_LAYERS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")


@dataclass(frozen=True)
class LossWeights:
    content: float = 1.0
    style: float = 5.0
    tv: float = 1e-4

    def __post_init__(self):
        if min(self.content, self.style, self.tv) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.content == self.style == self.tv == 0:
            raise ContractError("loss weights cannot all be zero")


@dataclass
class StyleReference:
    style_id: str
    image: np.ndarray | None
    attack_type: str = "print"
    source: str = ""  # manifest path of the reference frame, if any


# --- losses -----------------------------------------------------------------


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ContractError(f"unknown reduction {reduction!r}")


def content_loss(yhat, y, extractor: FeatureExtractor, layer: str = CONTENT_LAYER, reduction="mean",
                 target_features: torch.Tensor | None = None):
    """Mean squared feature difference at ``layer``, averaged over C*H*W."""
    if target_features is None:
        if yhat.shape != y.shape:
            raise ContractError(f"shape mismatch {tuple(yhat.shape)} vs {tuple(y.shape)}")
        with torch.no_grad():
            target_features = extractor.features(y, [layer])[layer]
    fy = extractor.features(yhat, [layer])[layer]
    return _reduce((fy - target_features).pow(2).flatten(1).mean(1), reduction)


def style_grams(image: torch.Tensor, extractor: FeatureExtractor, layers=STYLE_LAYERS) -> dict[str, torch.Tensor]:
    """Gram matrices (C, C) of a single (1, 3, H, W) style image."""
    with torch.no_grad():
        feats = extractor.features(image, layers)
    return {l: gram(feats[l])[0] for l in layers}


def style_loss(yhat, grams: Mapping[str, torch.Tensor], extractor: FeatureExtractor, layers=STYLE_LAYERS,
               reduction="mean"):
    """Sum over layers of the squared Frobenius distance between Gram matrices."""
    missing = [l for l in layers if l not in grams]
    if missing:
        raise ContractError(f"style grams missing for layer(s) {missing}")
    feats = extractor.features(yhat, layers)
    total = 0
    for l in layers:
        diff = gram(feats[l]) - grams[l].to(feats[l].dtype)
        total = total + diff.pow(2).sum(dim=(1, 2))
    return _reduce(total, reduction)


def tv_loss(x: torch.Tensor, reduction="mean"):
    """Squared neighbour differences summed over channels, divided by H*W."""
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ContractError("tv_loss needs H, W >= 2")
    dv = (x[..., 1:, :] - x[..., :-1, :]).pow(2).sum(dim=(1, 2, 3))
    dh = (x[..., :, 1:] - x[..., :, :-1]).pow(2).sum(dim=(1, 2, 3))
    return _reduce((dv + dh) / (h * w), reduction)


class PerceptualObjective:
    """alpha*content + beta*style + gamma*tv for a fixed style target."""

    def __init__(self, extractor: FeatureExtractor, grams: Mapping[str, torch.Tensor], weights: LossWeights,
                 content_layer=CONTENT_LAYER, style_layers=STYLE_LAYERS):
        self.extractor = extractor
        self.grams = dict(grams)
        self.weights = weights
        self.content_layer = content_layer
        self.style_layers = tuple(style_layers)

    def __call__(self, yhat, content, reduction="mean"):
        w = self.weights
        layers = set(self.style_layers) if w.style else set()
        if w.content:
            layers.add(self.content_layer)
        feats = self.extractor.features(yhat, layers) if layers else {}
        total = torch.zeros(yhat.shape[0], dtype=yhat.dtype)
        if w.content:
            with torch.no_grad():
                target = self.extractor.features(content, [self.content_layer])[self.content_layer]
            total = total + w.content * (feats[self.content_layer] - target).pow(2).flatten(1).mean(1)
        if w.style:
            for l in self.style_layers:
                diff = gram(feats[l]) - self.grams[l].to(yhat.dtype)
                total = total + w.style * diff.pow(2).sum(dim=(1, 2))
        if w.tv:
            total = total + w.tv * tv_loss(yhat, reduction="none")
        return _reduce(total, reduction)


# --- transform network ------------------------------------------------------


class ConvIN(nn.Sequential):
    def __init__(self, cin, cout, k, stride=1, relu=True):
        layers = [nn.ReflectionPad2d(k // 2), nn.Conv2d(cin, cout, k, stride), nn.InstanceNorm2d(cout, affine=True)]
        if relu:
            layers.append(nn.ReLU())
        super().__init__(*layers)


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(ConvIN(ch, ch, 3), ConvIN(ch, ch, 3, relu=False))

    def forward(self, x):
        return x + self.body(x)


class UpConvIN(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Upsample(scale_factor=2, mode="nearest"), ConvIN(cin, cout, 3))


class TransformNet(nn.Module):
    """Encoder (9x9, two stride-2 3x3) -> residual blocks -> two 2x upsampling convs -> 9x9 output."""

    total_stride = 4

    def __init__(self, width: int = 32, residual_blocks: int = 5):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(ConvIN(3, w, 9), ConvIN(w, 2 * w, 3, 2), ConvIN(2 * w, 4 * w, 3, 2))
        self.residual = nn.Sequential(*[ResidualBlock(4 * w) for _ in range(residual_blocks)])
        self.decoder = nn.Sequential(UpConvIN(4 * w, 2 * w), UpConvIN(2 * w, w))
        self.output = nn.Sequential(nn.ReflectionPad2d(4), nn.Conv2d(w, 3, 9))

    def forward(self, x):
        return torch.sigmoid(self.output(self.decoder(self.residual(self.encoder(x)))))


# --- training ---------------------------------------------------------------


@dataclass
class StyleTrainConfig:
    iterations: int = 40_000
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    image_size: int = 256
    width: int = 32
    residual_blocks: int = 5
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.image_size < 8:
            raise ContractError(f"invalid style training config {self}")


# the desk-scale configuration used by the acceptance checks on CPU
DESK_STYLE_CONFIG = StyleTrainConfig(iterations=2000, batch_size=1, image_size=128, width=16)


@dataclass
class StyleModel:
    style_id: str
    attack_type: str
    net: TransformNet
    grams: dict[str, torch.Tensor]
    config: StyleTrainConfig
    weights: LossWeights
    loss_trace: list[float] = field(default_factory=list)
    corpus_hash: str = ""
    checkpoints: dict[int, float] = field(default_factory=dict)

    @property
    def fingerprint(self) -> dict:
        return {
            "corpus_hash": self.corpus_hash,
            "seed": self.config.seed,
            "checkpoints": {str(k): v for k, v in self.checkpoints.items()},
        }

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        out.update({f"gram.{k}": v for k, v in self.grams.items()})
        return out

    @property
    def checksum(self) -> str:
        return tensors_checksum(self.tensors())

    def save(self, path, extra_meta: dict | None = None) -> Path:
        meta = {
            "style_id": self.style_id,
            "attack_type": self.attack_type,
            "config": asdict(self.config),
            "loss_weights": asdict(self.weights),
            "loss_trace": self.loss_trace,
            "corpus_hash": self.corpus_hash,
            "seed": self.config.seed,
            "checkpoints": {str(k): v for k, v in self.checkpoints.items()},
        }
        meta.update(extra_meta or {})
        return save_archive(path, self.tensors(), meta)

    @classmethod
    def load(cls, path) -> "StyleModel":
        tensors, meta = load_archive(path)
        config = StyleTrainConfig(**meta["config"])
        net = TransformNet(config.width, config.residual_blocks)
        net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
        net.eval()
        grams = {k[5:]: v for k, v in tensors.items() if k.startswith("gram.")}
        return cls(
            meta["style_id"], meta["attack_type"], net, grams, config, LossWeights(**meta["loss_weights"]),
            list(meta.get("loss_trace", [])), meta.get("corpus_hash", ""),
            {int(k): v for k, v in meta.get("checkpoints", {}).items()},
        )


def _prepare_batch(images: Sequence[np.ndarray], size: int) -> torch.Tensor:
    return to_tensor(np.stack([resize_bilinear(as_image(im), size) for im in images]))


def train_style_model(ref: StyleReference, corpus: Sequence[np.ndarray], extractor: FeatureExtractor,
                      weights: LossWeights = LossWeights(), config: StyleTrainConfig = StyleTrainConfig()) -> StyleModel:
    """Fit a TransformNet mapping corpus images towards the style of ``ref``."""
    if not corpus:
        raise ContractError("style training corpus is empty")
    with deterministic_mode(config.seed):
        data = _prepare_batch(corpus, config.image_size)
        style_img = _prepare_batch([ref.image], config.image_size)
        grams = style_grams(style_img, extractor)
        objective = PerceptualObjective(extractor, grams, weights)
        net = TransformNet(config.width, config.residual_blocks)
        net.train()
        opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
        gen = torch.Generator().manual_seed(config.seed)
        order = torch.randperm(len(data), generator=gen)
        cursor = 0
        trace: list[float] = []
        checkpoints: dict[int, float] = {}
        last_good = {k: v.clone() for k, v in net.state_dict().items()}
        for it in range(1, config.iterations + 1):
            idx = []
            while len(idx) < config.batch_size:
                if cursor == len(order):
                    order, cursor = torch.randperm(len(data), generator=gen), 0
                idx.append(int(order[cursor]))
                cursor += 1
            x = data[idx]
            opt.zero_grad()
            loss = objective(net(x), x)
            value = loss.item()
            if not math.isfinite(value):
                net.load_state_dict(last_good)
                raise TrainingDivergedError(
                    f"style '{ref.style_id}' diverged at iteration {it}", last_state=last_good, trace=trace
                )
            loss.backward()
            opt.step()
            trace.append(value)
            if it % config.checkpoint_every == 0 or it == config.iterations:
                checkpoints[it] = value
                last_good = {k: v.clone() for k, v in net.state_dict().items()}
                log.debug("style %s it %d loss %.6g", ref.style_id, it, value)
        net.eval()
    return StyleModel(ref.style_id, ref.attack_type, net, grams, config, weights, trace, hash_images(corpus),
                      checkpoints)


def stylize(model: StyleModel, x: np.ndarray) -> np.ndarray:
    """Apply a trained style model; output has the input's shape and values in [0, 1]."""
    x = as_image(x)
    h, w = x.shape[:2]
    s = TransformNet.total_stride
    ph, pw = (-h) % s, (-w) % s
    t = to_tensor(x)
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        t = F.pad(t, (0, pw, 0, ph), mode=mode)
    model.net.eval()
    with torch.no_grad():
        y = model.net(t)[..., :h, :w]
    return np.clip(from_tensor(y)[0], 0.0, 1.0)


def stylize_batch(model: StyleModel, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [stylize(model, im) for im in images]


# --- direct (pixel) optimisation --------------------------------------------


@dataclass
class DirectConfig:
    steps: int = 500
    learning_rate: float = 0.01
    image_size: int | None = None


def optimize_direct(content: np.ndarray | Sequence[np.ndarray], ref: StyleReference, extractor: FeatureExtractor,
                    weights: LossWeights = LossWeights(), config: DirectConfig = DirectConfig(),
                    grams: Mapping[str, torch.Tensor] | None = None):
    """Optimise the pixels of a working image initialised at ``content``.

    Accepts a single image or a list (optimised jointly, losses independent).
    Returns ``(images, trace)`` where trace holds the mean total loss before
    each step and after the last one.
    """
    single = isinstance(content, np.ndarray) and content.ndim == 3
    images = [content] if single else list(content)
    size = config.image_size or images[0].shape[0]
    target = _prepare_batch(images, size)
    if grams is None:
        grams = style_grams(_prepare_batch([ref.image], size), extractor)
    objective = PerceptualObjective(extractor, grams, weights)
    work = target.clone().requires_grad_(True)
    opt = torch.optim.Adam([work], lr=config.learning_rate)
    trace: list[float] = []
    for step in range(config.steps):
        opt.zero_grad()
        loss = objective(work, target)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"direct optimisation diverged at step {step}", trace=trace)
        trace.append(value)
        loss.backward()
        opt.step()
        with torch.no_grad():
            work.clamp_(0.0, 1.0)
    with torch.no_grad():
        trace.append(float(objective(work, target)))
    out = [im for im in from_tensor(work)]
    return (out[0] if single else out), trace


def total_loss(images: Sequence[np.ndarray], contents: Sequence[np.ndarray], grams, extractor,
               weights: LossWeights) -> np.ndarray:
    """Per-image total perceptual loss of ``images`` against their ``contents``."""
    objective = PerceptualObjective(extractor, grams, weights)
    with torch.no_grad():
        return objective(to_tensor(np.stack(images)), to_tensor(np.stack(contents)), reduction="none").numpy()
