"""Seed derivation.

Every random stream in the package is a ``numpy.random.Generator`` backed by
PCG64. A stream is identified by a top-level integer seed plus an optional
role tag; the pair is hashed with BLAKE2b (8-byte digest, little-endian) into
the 64-bit seed handed to PCG64. This keeps runs replayable piecewise: the
training stream does not shift when, say, the number of generated shapes
changes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *tags: object) -> int:
    """Hash ``seed`` and role tags into a 64-bit seed."""
    key = ":".join([str(int(seed))] + [str(t) for t in tags]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def make_rng(seed: int, *tags: object) -> np.random.Generator:
    if not tags:
        return np.random.Generator(np.random.PCG64(int(seed)))
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
