"""Deterministic RNG derivation: one root seed, role- and index-keyed streams.

Every random decision (rewiring, DropKey, parameter init, shuffling) draws
from its own stream derived via numpy SeedSequence spawn keys, so any stream
can be replayed without consuming the others.
"""

from __future__ import annotations

import numpy as np
import torch

ROLE_REWIRE = 0
ROLE_DROPKEY = 1
ROLE_INIT = 2
ROLE_SHUFFLE = 3


def derive_seed_sequence(root_seed: int, role: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root_seed, spawn_key=(role, *key))


def derive_rng(root_seed: int, role: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(root_seed, role, *key))


def derive_torch_generator(root_seed: int, role: int, *key: int) -> torch.Generator:
    state = derive_seed_sequence(root_seed, role, *key).generate_state(2, np.uint64)
    generator = torch.Generator()
    generator.manual_seed(int(state[0] >> 1))  # keep within torch's signed range
    return generator
