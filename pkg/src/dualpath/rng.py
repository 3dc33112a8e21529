"""Seed derivation and random generator construction.

All randomness in the package flows through Philox4x32-10 (the
counter-based bit generator shipped with NumPy), keyed by a SHA-256
digest of the master seed plus a label path. Deriving independent
streams this way makes every pipeline stage insensitive to how much
randomness other stages consume, which is what makes corpus
degradation and batch sampling order-independent and replayable.
"""

import hashlib

import numpy as np


def derive_key(*parts) -> int:
    """Collapse (master_seed, label, ...) into a 128-bit Philox key.

    Parts are joined with a separator byte so ("ab", "c") and ("a", "bc")
    derive different keys.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:16], "little")


def make_rng(*parts) -> np.random.Generator:
    """Philox generator for the stream named by ``parts``."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
