"""Per-subject liveness classifiers: Spoof-ModNet and pluggable pretrained backbones.

Class index 0 is live, 1 is spoof.
"""
from __future__ import annotations

import importlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .determinism import deterministic_mode
from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .images import as_image, hash_images, resize_bilinear, to_tensor
from .tensorio import load_archive, save_archive

log = logging.getLogger(__name__)

LIVE, SPOOF = 0, 1
SPOOF_MODNET_INPUT = 32

# (layer, params) exactly as tabulated for the architecture; norms count
# gamma, beta, running mean and running variance.
TABLE_PARAMS = [
    ("conv2d_1", 448), ("batch_norm_1", 64), ("conv2d_2", 2320), ("batch_norm_2", 64),
    ("conv2d_3", 4640), ("batch_norm_3", 128), ("conv2d_4", 9248), ("batch_norm_4", 128),
    ("dense_1", 131136), ("batch_norm_5", 256), ("dense_2", 130),
]
TABLE_SHAPES = {
    "conv2d_1": (32, 32, 16), "activation_1": (32, 32, 16), "batch_norm_1": (32, 32, 16),
    "conv2d_2": (32, 32, 16), "activation_2": (32, 32, 16), "batch_norm_2": (32, 32, 16),
    "max_pool2d_1": (16, 16, 16), "dropout_1": (16, 16, 16),
    "conv2d_3": (16, 16, 32), "activation_3": (16, 16, 32), "batch_norm_3": (16, 16, 32),
    "conv2d_4": (16, 16, 32), "activation_4": (16, 16, 32), "batch_norm_4": (16, 16, 32),
    "max_pool2d_2": (8, 8, 32), "dropout_2": (8, 8, 32), "flatten_1": (2048,),
    "dense_1": (64,), "activation_5": (64,), "batch_norm_5": (64,), "dropout_3": (64,),
    "dense_2": (2,), "activation_6": (2,),
}
TABLE_TOTAL = 148_562


class SpoofModNet(nn.Module):
    """conv-relu-bn x2, pool, dropout, conv-relu-bn x2, pool, dropout, dense-relu-bn, dropout, dense.

    ``forward`` returns logits; the softmax (activation_6) is applied by
    :func:`predict_proba`.
    """

    def __init__(self, dropout=(0.25, 0.25, 0.5)):
        super().__init__()
        d1, d2, d3 = dropout
        self.layers = nn.Sequential()
        add = self.layers.add_module
        add("conv2d_1", nn.Conv2d(3, 16, 3, padding=1))
        add("activation_1", nn.ReLU())
        add("batch_norm_1", nn.BatchNorm2d(16))
        add("conv2d_2", nn.Conv2d(16, 16, 3, padding=1))
        add("activation_2", nn.ReLU())
        add("batch_norm_2", nn.BatchNorm2d(16))
        add("max_pool2d_1", nn.MaxPool2d(2))
        add("dropout_1", nn.Dropout(d1))
        add("conv2d_3", nn.Conv2d(16, 32, 3, padding=1))
        add("activation_3", nn.ReLU())
        add("batch_norm_3", nn.BatchNorm2d(32))
        add("conv2d_4", nn.Conv2d(32, 32, 3, padding=1))
        add("activation_4", nn.ReLU())
        add("batch_norm_4", nn.BatchNorm2d(32))
        add("max_pool2d_2", nn.MaxPool2d(2))
        add("dropout_2", nn.Dropout(d2))
        add("flatten_1", nn.Flatten())
        add("dense_1", nn.Linear(2048, 64))
        add("activation_5", nn.ReLU())
        add("batch_norm_5", nn.BatchNorm1d(64))
        add("dropout_3", nn.Dropout(d3))
        add("dense_2", nn.Linear(64, 2))

    def forward(self, x):
        return self.layers(x)


def layer_param_counts(model: nn.Module) -> dict[str, int]:
    """Per-module parameter counts including batch-norm running statistics."""
    counts = {}
    for name, mod in model.named_modules():
        if any(True for _ in mod.children()):
            continue
        n = sum(p.numel() for p in mod.parameters(recurse=False))
        if isinstance(mod, nn.modules.batchnorm._BatchNorm):
            n += mod.running_mean.numel() + mod.running_var.numel()
        counts[name.split(".")[-1]] = n
    return counts


def parameter_count(model: nn.Module) -> int:
    return sum(layer_param_counts(model).values())


def layer_output_shapes(model: SpoofModNet, size: int = SPOOF_MODNET_INPUT) -> dict[str, tuple[int, ...]]:
    """Per-layer output shapes (H, W, C) / (features,) for one input, plus activation_6 (softmax)."""
    shapes: dict[str, tuple[int, ...]] = {}
    hooks = []
    for name, mod in model.layers.named_children():
        def hook(_m, _i, out, name=name):
            s = tuple(out.shape[1:])
            shapes[name] = (s[1], s[2], s[0]) if len(s) == 3 else s
        hooks.append(mod.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(torch.zeros(1, 3, size, size))
        shapes["activation_6"] = tuple(F.softmax(logits, dim=1).shape[1:])
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return shapes


# --- config and model containers --------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    dropout: tuple[float, float, float] = (0.25, 0.25, 0.5)
    augmentation: bool = False
    optimizer: str = "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        self.dropout = tuple(self.dropout)
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError(f"invalid training config {self}")
        if not all(0 <= d < 1 for d in self.dropout):
            raise ContractError("dropout rates must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FinetuneConfig:
    learning_rate: float = 0.01
    batch_size: int = 100
    steps: int = 4000
    seed: int = 0
    train_trunk: bool = False
    momentum: float = 0.9


@dataclass
class BackboneDescriptor:
    """How to build an external backbone: ``builder`` is ``"module:callable"``."""

    builder: str = "torchvision.models:mobilenet_v2"
    kwargs: dict = field(default_factory=dict)
    head: str = "classifier.1"
    input_size: int = 224
    mean_rgb: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std_rgb: tuple[float, float, float] = (0.229, 0.224, 0.225)
    name: str = "mobilenet_v2"


@dataclass
class Prediction:
    p_live: float
    p_spoof: float

    @property
    def decision(self) -> str:
        # ties go to spoof
        return "spoof" if self.p_spoof >= self.p_live else "live"


class ExternalClassifier(nn.Module):
    """Pretrained backbone with its head replaced by a 2-way linear layer."""

    def __init__(self, descriptor: BackboneDescriptor, seed: int = 0):
        super().__init__()
        module_name, _, attr = descriptor.builder.partition(":")
        try:
            builder = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigurationError(f"cannot import backbone builder {descriptor.builder!r}: {exc}") from exc
        self.descriptor = descriptor
        self.net = builder(**descriptor.kwargs)
        self.register_buffer("mean", torch.tensor(descriptor.mean_rgb).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(descriptor.std_rgb).view(1, 3, 1, 1))
        self._seed = seed

    def _head_parent(self):
        *path, last = self.descriptor.head.split(".")
        parent = self.net
        for p in path:
            parent = getattr(parent, p) if not p.isdigit() else parent[int(p)]
        return parent, last

    def get_head(self) -> nn.Linear:
        parent, last = self._head_parent()
        return parent[int(last)] if last.isdigit() else getattr(parent, last)

    def reset_head(self, seed: int):
        old = self.get_head()
        g = torch.Generator().manual_seed(seed)
        head = nn.Linear(old.in_features, 2)
        bound = 1 / math.sqrt(old.in_features)
        with torch.no_grad():
            head.weight.copy_(torch.rand(head.weight.shape, generator=g) * 2 * bound - bound)
            head.bias.zero_()
        parent, last = self._head_parent()
        if last.isdigit():
            parent[int(last)] = head
        else:
            setattr(parent, last, head)

    def trunk_features(self, x):
        """Input of the head (the trunk's pooled features)."""
        captured = {}
        handle = self.get_head().register_forward_hook(lambda m, i, o: captured.setdefault("f", i[0]))
        try:
            self.net((x - self.mean) / self.std)
        finally:
            handle.remove()
        return captured["f"]

    def forward(self, x):
        return self.net((x - self.mean) / self.std)


@dataclass
class ClassifierModel:
    subject_id: str
    backbone: str  # "spoof_modnet" | "external_backbone"
    net: nn.Module
    input_size: int
    config: dict = field(default_factory=dict)
    fingerprint: dict = field(default_factory=dict)
    descriptor: BackboneDescriptor | None = None

    def save(self, path, extra_meta: dict | None = None) -> Path:
        meta = {
            "subject_id": self.subject_id,
            "backbone": self.backbone,
            "input_size": self.input_size,
            "config": self.config,
            "data_hashes": self.fingerprint.get("data_hashes", {}),
            "seed": self.config.get("seed"),
            "fingerprint": self.fingerprint,
            "descriptor": asdict(self.descriptor) if self.descriptor else None,
        }
        meta.update(extra_meta or {})
        return save_archive(path, self.net.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        tensors, meta = load_archive(path)
        if meta["backbone"] == "spoof_modnet":
            dropout = meta["config"].get("dropout", (0.25, 0.25, 0.5))
            net = SpoofModNet(tuple(dropout))
            descriptor = None
        else:
            descriptor = BackboneDescriptor(**meta["descriptor"])
            net = ExternalClassifier(descriptor)
            net.reset_head(0)
        net.load_state_dict(tensors)
        net.eval()
        return cls(meta["subject_id"], meta["backbone"], net, meta["input_size"], meta["config"],
                   meta.get("fingerprint", {}), descriptor)


def build_spoof_modnet(seed: int = 0, subject_id: str = "", dropout=(0.25, 0.25, 0.5)) -> ClassifierModel:
    with deterministic_mode(seed):
        net = SpoofModNet(dropout)
    return ClassifierModel(subject_id, "spoof_modnet", net, SPOOF_MODNET_INPUT, {"seed": seed, "dropout": list(dropout)})


def preprocess(face: np.ndarray, size: int = SPOOF_MODNET_INPUT) -> np.ndarray:
    """Bilinear resize of a face crop to the classifier input size."""
    return np.clip(resize_bilinear(as_image(face), size), 0.0, 1.0)


def _batch(images: Sequence[np.ndarray], size: int) -> torch.Tensor:
    return to_tensor(np.stack([preprocess(im, size) for im in images]))


# --- training ---------------------------------------------------------------


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=gen) < 0.5
    x = x.clone()
    x[flip] = x[flip].flip(-1)
    return x


def fit_classifier(model: ClassifierModel, images: Sequence[np.ndarray], labels: Sequence[int],
                   config: TrainConfig) -> ClassifierModel:
    """Minimise 2-class cross-entropy; epoch order drawn from a generator seeded by ``config.seed``."""
    labels_t = torch.as_tensor(list(labels), dtype=torch.long)
    if set(labels_t.tolist()) != {LIVE, SPOOF}:
        raise ContractError("training data must contain both live and spoof samples")
    x_all = _batch(images, model.input_size)
    net = model.net
    with deterministic_mode(config.seed):
        params = [p for p in net.parameters() if p.requires_grad]
        if config.optimizer == "sgd":
            opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
        else:
            opt = torch.optim.Adam(params, lr=config.learning_rate)
        gen = torch.Generator().manual_seed(config.seed)
        history = []
        n = len(labels_t)
        for epoch in range(config.epochs):
            net.train()
            order = torch.randperm(n, generator=gen)
            total, seen = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                if len(idx) < 2 and n >= 2:
                    # batch norm needs more than one sample per batch
                    idx = torch.cat([idx, order[:1]])
                xb = x_all[idx]
                if config.augmentation:
                    xb = _augment(xb, gen)
                opt.zero_grad()
                loss = F.cross_entropy(net(xb), labels_t[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"classifier for {model.subject_id!r} diverged in epoch {epoch}", trace=history
                    )
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            history.append(total / seen)
        net.eval()
    model.config = {**model.config, **asdict(config)}
    model.config["dropout"] = list(config.dropout)
    model.fingerprint = {
        **model.fingerprint,
        "loss_history": history,
        "final_train_loss": history[-1] if history else None,
        "seed": config.seed,
    }
    return model


def train_on_images(subject: str, live_images: Sequence[np.ndarray], spoof_images: Sequence[np.ndarray],
                    config: TrainConfig = TrainConfig(), backbone: str = "spoof_modnet",
                    external: ClassifierModel | None = None,
                    finetune: FinetuneConfig | None = None) -> ClassifierModel:
    """Train one subject's classifier on live (label 0) and spoof (label 1) images."""
    if not live_images or not spoof_images:
        raise ContractError(f"subject {subject!r}: both live and spoof training images are required")
    images = list(live_images) + list(spoof_images)
    labels = [LIVE] * len(live_images) + [SPOOF] * len(spoof_images)
    hashes = {"live": hash_images(live_images), "spoof": hash_images(spoof_images)}
    if backbone == "spoof_modnet":
        model = build_spoof_modnet(config.seed, subject, config.dropout)
        model.fingerprint["data_hashes"] = hashes
        return fit_classifier(model, images, labels, config)
    if backbone == "external_backbone":
        if external is None:
            raise ConfigurationError("external_backbone requires an attached pretrained model")
        external.subject_id = subject
        external.fingerprint["data_hashes"] = hashes
        return finetune_external(external, images, labels, finetune or FinetuneConfig(seed=config.seed))
    raise ConfigurationError(f"unknown backbone {backbone!r}")


def train_subject_model(subject: str, live_train: Sequence, synthetic, config: TrainConfig = TrainConfig(),
                        root=None, real_spoofs: Sequence = (), **kwargs) -> ClassifierModel:
    """Train from manifest records and a :class:`~userfas.synthesis.SyntheticSpoofSet`.

    ``root`` resolves record paths; ``real_spoofs`` optionally mixes real spoof
    train records into the spoof class (ablation only).
    """
    from .images import load_image

    if any(r.split != "train" or r.label != "live" for r in live_train):
        raise ContractError("live_train must hold live records from the train split")
    base = Path(root) if root is not None else Path(".")
    live = [load_image(base / r.path) for r in live_train]
    spoof = [load_image(p) for p in synthetic.paths()] if synthetic is not None else []
    spoof += [load_image(base / r.path) for r in real_spoofs]
    model = train_on_images(subject, live, spoof, config, **kwargs)
    if synthetic is not None:
        model.fingerprint["synthetic_provenance"] = synthetic.provenance
    return model


# --- inference --------------------------------------------------------------


def predict_proba(model: ClassifierModel, faces: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """(N, 2) softmax probabilities [p_live, p_spoof]."""
    model.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(faces), batch_size):
            xb = _batch(faces[start : start + batch_size], model.input_size)
            out.append(F.softmax(model.net(xb).double(), dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def predict(model: ClassifierModel, face: np.ndarray) -> Prediction:
    p = predict_proba(model, [face])[0]
    return Prediction(float(p[LIVE]), float(p[SPOOF]))


def training_accuracy(model: ClassifierModel, images, labels) -> float:
    p = predict_proba(model, images)
    decisions = np.where(p[:, SPOOF] >= p[:, LIVE], SPOOF, LIVE)
    return float(np.mean(decisions == np.asarray(labels)))


# --- external backbones -----------------------------------------------------


def attach_external_backbone(descriptor: BackboneDescriptor, pretrained_weights, seed: int = 0,
                             subject_id: str = "") -> ClassifierModel:
    """Build the described backbone, load user-supplied weights, fit a fresh 2-class head."""
    from safetensors.torch import load_file

    path = Path(pretrained_weights) if pretrained_weights else None
    if path is None or not path.exists():
        raise ConfigurationError(f"pretrained weights for {descriptor.name} not found: {pretrained_weights}")
    net = ExternalClassifier(descriptor, seed)
    state = load_file(str(path)) if path.suffix == ".safetensors" else torch.load(path, map_location="cpu")
    missing, unexpected = net.net.load_state_dict(state, strict=False)
    head_prefix = descriptor.head + "."
    bad = [k for k in missing if not k.startswith(head_prefix)]
    if bad or unexpected:
        raise ConfigurationError(f"weights do not match {descriptor.builder}: missing {bad[:3]}, unexpected {unexpected[:3]}")
    net.reset_head(seed)
    net.eval()
    return ClassifierModel(subject_id, "external_backbone", net, descriptor.input_size, {"seed": seed},
                           {"pretrained": str(path)}, descriptor)


def finetune_external(model: ClassifierModel, images: Sequence[np.ndarray], labels: Sequence[int],
                      config: FinetuneConfig = FinetuneConfig()) -> ClassifierModel:
    """SGD fine-tuning for ``config.steps`` batches; with a frozen trunk only the head trains."""
    net: ExternalClassifier = model.net
    labels_t = torch.as_tensor(list(labels), dtype=torch.long)
    if set(labels_t.tolist()) != {LIVE, SPOOF}:
        raise ContractError("training data must contain both live and spoof samples")
    x_all = _batch(images, model.input_size)
    head = net.get_head()
    with deterministic_mode(config.seed):
        if config.train_trunk:
            params, inputs = list(net.parameters()), x_all
        else:
            net.requires_grad_(False)
            head.requires_grad_(True)
            net.eval()
            with torch.no_grad():
                inputs = torch.cat([net.trunk_features(x_all[i : i + 64]) for i in range(0, len(x_all), 64)])
            params = list(head.parameters())
        opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
        gen = torch.Generator().manual_seed(config.seed)
        history = []
        n = len(labels_t)
        order, cursor = torch.randperm(n, generator=gen), 0
        for step in range(config.steps):
            idx = []
            while len(idx) < min(config.batch_size, n):
                if cursor == n:
                    order, cursor = torch.randperm(n, generator=gen), 0
                idx.append(int(order[cursor]))
                cursor += 1
            if config.train_trunk:
                net.train()
                logits = net(inputs[idx])
            else:
                logits = head(inputs[idx])
            loss = F.cross_entropy(logits, labels_t[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"fine-tuning diverged at step {step}", trace=history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
        net.eval()
    model.config = {**model.config, **asdict(config)}
    model.fingerprint = {**model.fingerprint, "loss_history": history,
                         "final_train_loss": history[-1] if history else None, "seed": config.seed}
    return model
