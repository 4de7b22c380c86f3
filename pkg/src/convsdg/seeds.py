"""Stable seed derivation for per-item RNG streams.

Python's builtin ``hash`` is salted per process, so reproducible per-turn /
per-topic streams are derived from SHA-256 of the labelled parts instead.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Map a tuple of ints/strings to a stable 63-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big") >> 1
