"""Deterministic random-stream derivation.

Every stochastic component draws from a generator derived from a global seed
plus a structural path (for example ``("scene", 17)`` or ``("stage", 2,
"rollout", 5, 3)``).  Streams are therefore reproducible bit-for-bit and
independent of execution order, arm names, or platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _part_to_int(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_seed_sequence(seed: int, *path: int | str) -> np.random.SeedSequence:
    entropy = [int(seed) & _MASK64] + [_part_to_int(p) for p in path]
    return np.random.SeedSequence(entropy)


def child_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *path)``."""
    return np.random.default_rng(child_seed_sequence(seed, *path))


def stable_seed(seed: int, *path: int | str) -> int:
    """64-bit integer seed for the stream identified by ``(seed, *path)``.

    Used where a component takes a plain integer seed (stages, evaluation)
    rather than a generator.
    """
    lo, hi = child_seed_sequence(seed, *path).generate_state(2, dtype=np.uint64)[:2]
    return int(lo) ^ int(hi)
