"""Seeded random streams.

Every source of randomness in the package goes through :func:`stream`, which
builds a numpy ``Generator`` over the PCG64 bit generator. Named streams are
derived from ``(seed, crc32(name))`` so that, e.g., the dropout masks of one
layer do not shift when another layer draws more numbers.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str = "") -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if name:
        key.append(zlib.crc32(name.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def fisher_yates(n: int, rng: np.random.Generator) -> list[int]:
    """Return a permutation of ``range(n)`` via an explicit Fisher-Yates pass."""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm
