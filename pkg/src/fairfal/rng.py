"""Named random streams derived from a master seed.

Every consumer of randomness asks for a stream keyed by a purpose string and
a tuple of integers (client id, cycle, round, ...). Streams are independent of
call order, so adding a consumer never perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_seed(seed: int, purpose: str, *keys: int) -> int:
    """Return a 64-bit integer seed for ``(seed, purpose, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), _purpose_key(purpose), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose, *keys))
