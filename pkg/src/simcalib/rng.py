"""Deterministic derivation of random sub-streams from one master seed.

Every random draw in the toolkit comes from a Philox (counter-based)
generator keyed by a hash of ``(master_seed, path)``.  Distinct paths give
statistically independent streams, so components can run in any order, or
in parallel, and still produce bit-identical results for a given master
seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_key", "derive_seed", "generator"]


def derive_key(master_seed: int, *path) -> int:
    """128-bit Philox key for the sub-stream named by ``path``.

    Path elements may be ints or strings; they are folded into a SHA-256
    digest together with the master seed, so unrelated streams never
    collide by accident.
    """
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:16], "little")


def derive_seed(master_seed: int, *path) -> int:
    """64-bit integer seed for the sub-stream (for storage or display)."""
    return derive_key(master_seed, *path) & 0xFFFFFFFFFFFFFFFF


def generator(master_seed: int, *path) -> np.random.Generator:
    """Generator for the sub-stream named by ``path`` under ``master_seed``."""
    return np.random.Generator(np.random.Philox(key=derive_key(master_seed, *path)))
