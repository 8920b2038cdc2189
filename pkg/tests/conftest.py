import numpy as np
import pytest
import torch

from userfas.backbone import FeatureExtractor, random_vgg19_state, write_weights
from userfas.images import save_png
from userfas.ingest import SampleRecord


@pytest.fixture(scope="session")
def extractor():
    return FeatureExtractor(random_vgg19_state(0))


@pytest.fixture(scope="session")
def extractor64(extractor):
    ext = FeatureExtractor(random_vgg19_state(0)).double()
    return ext


@pytest.fixture(scope="session")
def weights_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "vgg19.safetensors"
    return write_weights(path, random_vgg19_state(0), source_uri="random:test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_crop_tree(root, layout, size=8, seed=0):
    """layout: {subject: {(label, attack, video): n_frames}} -> files on disk."""
    r = np.random.default_rng(seed)
    for subject, videos in layout.items():
        for (label, attack, video), n in videos.items():
            base = root / subject / label
            if label == "spoof":
                base = base / attack
            for i in range(n):
                save_png(r.random((size, size, 3)), base / video / f"{i:05d}.png")
    return root


def make_records(subject, label, video_lengths, split="unassigned", attack=None):
    attack = attack or ("none" if label == "live" else "print")
    out = []
    for v, n in enumerate(video_lengths):
        for f in range(n):
            out.append(SampleRecord(subject, f"{label[0]}{v:03d}", f, label, attack, split,
                                    f"{subject}/{label}/{label[0]}{v:03d}/{f:05d}.png"))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
