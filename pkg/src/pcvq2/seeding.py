"""Labeled seed derivation: every random stream hangs off one integer seed."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, *labels: object) -> int:
    key = ":".join([str(int(seed))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def numpy_rng(seed: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))


def torch_generator(seed: int, *labels: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *labels) & ((1 << 63) - 1))
    return g
