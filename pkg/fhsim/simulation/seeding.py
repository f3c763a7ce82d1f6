"""
Deterministic random streams.

Every stochastic step (local shuffles, augmentation draws, phantom geometry) gets
its own generator derived from a tuple of keys, so results never depend on the
order in which parallel workers happen to run.
"""

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def stable_key(text: str) -> int:
    """64-bit integer digest of a string, identical across processes and machines."""
    digest = hashlib.blake2b(text.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def _entropy(part: Key) -> int:
    if isinstance(part, str):
        return stable_key(part)
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    return int(part) & 0xFFFFFFFFFFFFFFFF


def derive_rng(*parts: Key) -> np.random.Generator:
    """Generator seeded from an ordered tuple of ints and strings."""
    return np.random.default_rng(np.random.SeedSequence([_entropy(p) for p in parts]))
