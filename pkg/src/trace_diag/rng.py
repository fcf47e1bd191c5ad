"""Seeded child streams: one root seed, an independent generator per key path."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_word(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def child_rng(seed: int, *key) -> np.random.Generator:
    """Generator for ``(seed, *key)``; unrelated keys never share a stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_word(k) for k in key))
    return np.random.default_rng(ss)
