"""Deterministic sub-seed derivation.

All randomness in the toolchain flows from a single root seed through
`derive_seed`, so any unit of work (a K-shot draw, one synthesis item,
one sweep axis) owns an independent, reproducible stream regardless of
execution order. sha256 is used instead of Python's hash(), which is
salted per process.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *parts: object) -> int:
    """Derive a named 63-bit sub-seed from a root seed and label parts."""
    h = hashlib.sha256()
    h.update(b"ctxforge-seed")
    h.update(str(int(root)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rng_for(root: int, *parts: object) -> np.random.Generator:
    """A numpy Generator seeded from `derive_seed(root, *parts)`."""
    return np.random.default_rng(derive_seed(root, *parts))
