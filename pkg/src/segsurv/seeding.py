"""Deterministic seed fan-out.

A single global seed expands into independent per-stage, per-patient
streams by hashing the label parts, so adding patients or reordering
stages never shifts anyone else's randomness.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_rng"]


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary labeled parts."""
    text = "|".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
