"""Deterministic random draws keyed by structured labels.

All randomized stages (frame selection, partition shuffling, round
sampling, mask planning) derive their streams from a Philox
counter-based generator keyed by a hash of ``(label, seed, ...)``
parts.  Any draw is therefore reproducible in isolation: no global
state, no draw-order coupling between tokens or worker threads, and
identical bits on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_key", "generator"]


def derive_key(*parts: int | str | bytes) -> int:
    """Hash the given parts into a 128-bit Philox key.

    Parts are length-prefixed before hashing so that e.g.
    ``("ab", "c")`` and ``("a", "bc")`` produce different keys.
    """
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        if isinstance(part, bool):
            raw = b"\x01" if part else b"\x00"
        elif isinstance(part, int):
            raw = part.to_bytes((part.bit_length() + 8) // 8 + 1, "little", signed=True)
        elif isinstance(part, str):
            raw = part.encode("utf-8")
        elif isinstance(part, bytes):
            raw = part
        else:
            raise TypeError(f"unsupported key part type: {type(part).__name__}")
        h.update(len(raw).to_bytes(4, "little"))
        h.update(raw)
    return int.from_bytes(h.digest(), "little")


def generator(*parts: int | str | bytes) -> np.random.Generator:
    """A fresh Generator whose stream depends only on the key parts."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
