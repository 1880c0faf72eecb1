"""Seeded counter-based random streams.

Every stochastic component draws from its own named substream of a base
seed, so adding a consumer never perturbs the draws of another. Streams are
Philox (counter-based) generators keyed through SeedSequence, which is
stable across platforms and processes.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for substream ``name`` of ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    seq = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=(key,))
    return np.random.Generator(np.random.Philox(seq))
