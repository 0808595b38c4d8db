"""Counter-based random streams.

Every random draw comes from a Philox generator keyed by ``(seed, stream)``,
so a given stream yields the same numbers no matter which other streams
were consumed first or in what order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream kinds
SIGMA = 1
GAUSSIAN = 2
IMPULSE_BANDS = 3
IMPULSE = 4
STRIPE_BANDS = 5
STRIPE = 6
DEADLINE_BANDS = 7
DEADLINE = 8
PATCH = 9
INIT = 10
VALIDATION = 11


def stream_id(kind: int, a: int = 0, b: int = 0) -> int:
    """Pack a stream kind and two indices (each < 2**20) into 64 bits."""
    if not (0 <= a < 1 << 20 and 0 <= b < 1 << 20 and 0 <= kind < 1 << 24):
        raise ValueError(f"stream indices out of range: kind={kind} a={a} b={b}")
    return (kind << 40) | (a << 20) | b


def generator(seed: int, kind: int, a: int = 0, b: int = 0) -> np.random.Generator:
    key = (int(seed) & _MASK64) | (stream_id(kind, a, b) << 64)
    return np.random.Generator(np.random.Philox(key=key))
