"""Named sub-seeds derived from one root seed"""

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Hash (seed, name) into a stable 63-bit integer.

    The same root seed always yields the same sub-seed for a given name, across
    processes and platforms.
    """
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_rng(seed: int, name: str) -> np.random.Generator:
    """numpy Generator seeded from the named sub-seed"""
    return np.random.default_rng(derive_seed(seed, name))
