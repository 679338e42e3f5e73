"""Deterministic per-component RNG derivation from one master seed.

Every stochastic component hashes (master seed, component name, indices...)
into its own 64-bit seed, so no component's draws depend on how many draws
another component made, and reruns with the same master seed reproduce every
stream exactly on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def child_seed(*parts) -> int:
    """Hash the parts into a 64-bit seed; order and grouping both matter."""
    if not parts:
        raise ValueError("child_seed: at least one part is required")
    blob = _SEP.join(str(p).encode("utf-8") for p in parts)
    digest = hashlib.sha256(blob).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    """A fresh Generator seeded from the hashed parts."""
    return np.random.default_rng(child_seed(*parts))
