"""Counter-based random substreams.

A stream is fully identified by ``(seed, *keys)``: the same key tuple yields the
same draws no matter which worker asks for it or in what order. The first three
keys go straight into Philox counter words 1-3 (word 0 is left for the draws
themselves); any further keys and the key count are hashed into the second
Philox key word.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1

# purpose codes; usually the last key component
PURPOSES = {
    "split": 1,
    "shuffle1": 2,
    "shuffle2": 3,
    "view1": 4,
    "view2": 5,
    "view3": 6,
    "view1_b2": 7,
    "mix": 8,
    "init": 9,
    "generate": 10,
    "toy": 11,
    "refresh2": 12,
    "refresh3": 13,
    "calib": 14,
    "test": 15,
}


def _splitmix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    parts = [PURPOSES[k] if isinstance(k, str) else int(k) for k in keys]
    if any(p < 0 for p in parts):
        raise ValueError(f"stream keys must be non-negative, got {parts}")
    head = (parts[:3] + [0, 0, 0])[:3]
    k1 = _splitmix(len(parts))
    for p in parts[3:]:
        k1 = _splitmix(k1 ^ (p & _MASK))
    bitgen = np.random.Philox(counter=[0, *head], key=[int(seed) & _MASK, k1])
    return np.random.Generator(bitgen)
