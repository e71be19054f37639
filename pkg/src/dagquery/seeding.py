"""Deterministic named RNG substreams derived from a single run seed.

Every piece of randomness in a run (mining walks, branch capping, tail
edge choice, shuffling, dropout, init) draws from its own named substream
so components can be reordered or parallelized without perturbing each
other's draws, and reruns with the same seed are bit-identical.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError(f"substream keys must be non-negative, got {part!r}")
    return value


def substream(seed: int, *parts: int | str) -> np.random.Generator:
    """Return the generator for the (seed, *parts) substream."""
    entropy = [_key(seed)] + [_key(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
