"""Counter-based random streams.

Every random draw in the package comes from a Philox generator addressed by
the master seed plus an integer key path, so a given (seed, key) always yields
the same numbers regardless of evaluation order or parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for ``seed`` at position ``key`` in the key tree."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def key_of(text: str) -> int:
    """Stable 63-bit integer key for a string identifier."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
