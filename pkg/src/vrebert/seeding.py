"""Deterministic named RNG sub-streams derived from a single run seed.

Every piece of randomness in the package draws from one of these streams
so that a run is fully reproducible from its seed alone.  Stream names in
use: "data", "init", "shuffle", "dropout".
"""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name), stable across processes."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    entropy = int.from_bytes(digest[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))
