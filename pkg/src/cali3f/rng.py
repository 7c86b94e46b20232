"""Seed trees: one experiment seed fans out into independent per-concern streams.

A stream is keyed by ``(seed, concern, *keys)`` so toggling one feature never
shifts the random draws of another, and client work can run in any order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _concern_code(concern: str) -> int:
    return zlib.crc32(concern.encode("ascii"))


def stream(seed: int, concern: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _concern_code(concern), *map(int, keys)])
    )


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
