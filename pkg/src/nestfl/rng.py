"""Keyed random streams.

Every random decision in a run draws from a generator keyed by the run seed
plus a tuple of labels (round, device id, purpose, ...).  Streams are
counter-based (Philox), so draw ``i`` of a stream depends only on the key and
``i``; the order in which devices or rounds are processed never matters.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``."""
    entropy = [_word(seed)] + [_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
