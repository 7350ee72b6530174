"""Deterministic RNG streams keyed by (seed, purpose, indices...)."""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_rng(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for one (seed, purpose, keys) tuple.

    Streams with different keys never share state, so per-client work can run
    in any order (or concurrently) and still reproduce bit-for-bit.
    """
    entropy = [int(seed) & _MASK64, _tag(purpose)] + [int(k) & _MASK64 for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
