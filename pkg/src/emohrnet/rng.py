"""Counter-based random streams keyed by (seed, stream id).

Philox4x64 is used so that any (seed, stream) pair reproduces the same draws
on every platform, and streams for different purposes never overlap.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# purpose tags occupy the top byte of a stream id
INIT = 1
SHUFFLE = 2
AUGMENT = 3
SPLIT = 4
PREVIEW = 5
GRADCHECK = 6


def stream_id(purpose: int, epoch: int = 0, index: int = 0) -> int:
    if not (0 <= purpose < 256 and 0 <= epoch < (1 << 24) and 0 <= index < (1 << 32)):
        raise ValueError(f"stream components out of range: {purpose}, {epoch}, {index}")
    return (purpose << 56) | (epoch << 32) | index


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """A generator for ``stream`` of ``seed``; both are reduced to 64 bits."""
    key = (int(stream) & MASK64) << 64 | (int(seed) & MASK64)
    return np.random.Generator(np.random.Philox(key=key))
