"""Per-module seed derivation: every random stream hangs off one integer seed."""

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Return a 63-bit seed derived from ``seed`` and a stream ``name``."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))
