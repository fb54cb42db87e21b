"""Domain-separated seed derivation.

Every random stream in a run is derived from the master seed by folding a
tuple of keys through the splitmix64 finalizer::

    h = mix64(master)
    for key in keys:
        h = mix64(h ^ key')

where ``key'`` is the key itself for non-negative ints and the first eight
bytes of its SHA-256 digest (big-endian) for strings. The result seeds a
``numpy.random.Generator`` (PCG64). Streams used by the simulator:

    ("data",)                       dataset generation and partitioning
    ("init", client_id)             local model initialisation
    ("init", "global")              round-0 global header
    ("sample", round)               client sampling
    ("client", client_id, round)    local batch order
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """splitmix64 finalizer; a bijection on 64-bit integers."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _key_int(key: int | str) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return key & MASK64


def derive_seed(master: int, *keys: int | str) -> int:
    h = mix64(_key_int(master))
    for key in keys:
        h = mix64(h ^ _key_int(key))
    return h


def rng_for(master: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
