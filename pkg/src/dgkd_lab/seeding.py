"""Root-seed fanout. Every consumer of randomness draws from a named
substream so that enabling or disabling one component never perturbs the
random streams seen by the others."""
from __future__ import annotations

import hashlib

import numpy as np
import torch

_INT63 = 0x7FFF_FFFF_FFFF_FFFF


def substream_seed(root_seed, *names) -> int:
    """Stable 64-bit seed for the substream identified by `names`."""
    key = "/".join(str(n) for n in (root_seed, *names))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def np_rng(root_seed, *names) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root_seed, *names))


def torch_generator(root_seed, *names) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(root_seed, *names) & _INT63)
    return gen


def seed_torch_init(root_seed, *names) -> None:
    """Seed torch's global RNG immediately before building a module so that
    parameter initialisation is itself a named substream."""
    torch.manual_seed(substream_seed(root_seed, *names) & _INT63)
