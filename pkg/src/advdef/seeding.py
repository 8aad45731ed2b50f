"""Deterministic seeding for every RNG stream in the pipeline.

All randomness (data selection, attack random inits, model init, dropout)
flows either from the global seed set by :func:`seed_all` or from a child
seed derived with :func:`derive_seed`, so a run is reproducible from the
single seed recorded in its config.
"""

import hashlib
import random

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def seed_all(seed: int) -> None:
    """Seed python, numpy and torch global RNGs from one integer."""
    seed = int(seed)
    random.seed(seed)
    np.random.seed(seed & 0xFFFFFFFF)
    torch.manual_seed(seed)


def derive_seed(master: int, *parts) -> int:
    """Stable child seed from a master seed and a tag path.

    Hash-based so unrelated streams (per attack, per batch, per worker)
    never collide or correlate.
    """
    h = hashlib.sha256(repr((int(master),) + tuple(str(p) for p in parts)).encode())
    return int.from_bytes(h.digest()[:8], "big") & _MASK63


def derive_rng(master: int, *parts) -> np.random.Generator:
    """Numpy generator for the stream named by ``parts``."""
    return np.random.default_rng(derive_seed(master, *parts))


def derive_torch_generator(master: int, *parts) -> torch.Generator:
    """Torch generator for the stream named by ``parts`` (CPU)."""
    g = torch.Generator()
    g.manual_seed(derive_seed(master, *parts))
    return g
