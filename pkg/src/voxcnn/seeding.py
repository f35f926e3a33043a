"""Deterministic derivation of purpose-specific seeds from one global seed."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, tag: str) -> int:
    """Map (seed, tag) to a stable 64-bit sub-seed.

    Uses SHA-256 rather than hash() so the value survives process restarts
    and interpreter hash randomization.
    """
    digest = hashlib.sha256(f"{int(seed)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
