"""Sub-seed derivation.

Every random draw in the engine goes through :func:`rng`, which hashes a
purpose path (module name, role, node keys, counters) together with the
user's base seed. Two calls with the same path always yield the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *path) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for part in path:
        h.update(b"\x1f")
        h.update(repr(part).encode())
    return int.from_bytes(h.digest(), "little")


def rng(base: int, *path) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(derive_seed(base, *path)))
