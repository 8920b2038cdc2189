"""Seeding and deterministic-execution switches."""
from __future__ import annotations

import contextlib
import random

import numpy as np
import torch

_STATE = {"deterministic": True, "threads": 1}


def configure(deterministic: bool = True, threads: int | None = None) -> None:
    """Process-wide switch. Deterministic mode pins torch to one thread."""
    _STATE["deterministic"] = deterministic
    _STATE["threads"] = 1 if deterministic else (threads or torch.get_num_threads())


@contextlib.contextmanager
def deterministic_mode(seed: int):
    """Seed every RNG and, in deterministic mode, force bit-reproducible kernels."""
    prev_det = torch.are_deterministic_algorithms_enabled()
    prev_threads = torch.get_num_threads()
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if _STATE["deterministic"]:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)
