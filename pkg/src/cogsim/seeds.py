"""Deterministic seed derivation.

One 64-bit root seed per run. Every consumer draws from a named child
stream derived by hashing ``(root, *names)``, so adding an agent or a
module never perturbs the draws of any other stream, and the same
(root, names) pair yields the same stream on every platform.
"""

from __future__ import annotations

import hashlib
import random
import struct

_MASK64 = (1 << 64) - 1


def derive_seed(root_seed: int, *names: object) -> int:
    """Return a 64-bit seed for the child stream named by ``names``."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", root_seed & _MASK64))
    for name in names:
        h.update(str(name).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def child_rng(root_seed: int, *names: object) -> random.Random:
    """Return an independent ``random.Random`` for the named child stream."""
    return random.Random(derive_seed(root_seed, *names))
